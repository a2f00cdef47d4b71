import sqlite3
import json
import logging
import os
import traceback
from typing import Dict, List, Optional, Sequence

logger = logging.getLogger(__name__)

# Ledger file used when a caller does not name one
DB_PATH = os.path.join("runs", "runs.db")


def get_connection(db_path: Optional[str] = None):
    """Get database connection with proper settings"""
    path = db_path or DB_PATH
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        conn = sqlite3.connect(path)
        conn.row_factory = sqlite3.Row
        return conn
    except Exception as e:
        logger.error(f"❌ Database connection error: {e}")
        return None


def init_database(db_path: Optional[str] = None) -> bool:
    """Create the run ledger tables if they do not exist"""
    try:
        conn = get_connection(db_path)
        if not conn:
            return False

        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                run_id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                seed INTEGER,
                config_json TEXT,
                started_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                ended_at TIMESTAMP,
                status TEXT DEFAULT 'running'
            )
        """)

        # Per-image stage counts from infer runs
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS stage_counts (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER,
                image_id TEXT NOT NULL,
                patches INTEGER,
                proposals INTEGER,
                survivors INTEGER,
                final INTEGER,
                FOREIGN KEY (run_id) REFERENCES runs(run_id)
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS eval_rows (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER,
                image_id TEXT NOT NULL,
                tp INTEGER,
                fp INTEGER,
                fn INTEGER,
                p REAL,
                r REAL,
                f1 REAL,
                FOREIGN KEY (run_id) REFERENCES runs(run_id)
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS events (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER,
                event_type TEXT NOT NULL,
                event_data TEXT,
                timestamp TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        """)

        conn.commit()
        conn.close()
        logger.debug("Run ledger initialized")
        return True

    except Exception as e:
        logger.error(f"❌ Error initializing run ledger: {e}")
        traceback.print_exc()
        return False


def create_run(command: str, seed: int, config: Dict, db_path: Optional[str] = None) -> int:
    """Register a run and return its run_id, or -1 on failure"""
    try:
        conn = get_connection(db_path)
        if not conn:
            return -1

        cursor = conn.cursor()
        cursor.execute("""
            INSERT INTO runs (command, seed, config_json)
            VALUES (?, ?, ?)
        """, (command, seed, json.dumps(config, sort_keys=True)))

        run_id = cursor.lastrowid
        conn.commit()
        conn.close()

        logger.info(f"✅ Created run {run_id} | Command: {command} | Seed: {seed}")
        return run_id
    except Exception as e:
        logger.error(f"❌ Error creating run: {e}")
        traceback.print_exc()
        return -1


def end_run(run_id: int, status: str = "ok", db_path: Optional[str] = None) -> bool:
    """Mark a run as finished with the given status"""
    try:
        conn = get_connection(db_path)
        if not conn:
            return False

        cursor = conn.cursor()
        cursor.execute("""
            UPDATE runs
            SET ended_at = CURRENT_TIMESTAMP, status = ?
            WHERE run_id = ?
        """, (status, run_id))

        conn.commit()
        conn.close()
        return True
    except Exception as e:
        logger.error(f"❌ Error ending run: {e}")
        traceback.print_exc()
        return False


def record_stage_counts(run_id: int, stats: Sequence, db_path: Optional[str] = None) -> bool:
    """Store RunStats-like rows (image_id, patches, proposals, survivors, final)"""
    try:
        conn = get_connection(db_path)
        if not conn:
            return False

        cursor = conn.cursor()
        cursor.executemany("""
            INSERT INTO stage_counts (run_id, image_id, patches, proposals, survivors, final)
            VALUES (?, ?, ?, ?, ?, ?)
        """, [(run_id, s.image_id, s.patches, s.proposals, s.survivors, s.final) for s in stats])

        conn.commit()
        conn.close()
        return True
    except Exception as e:
        logger.error(f"❌ Error recording stage counts: {e}")
        traceback.print_exc()
        return False


def record_eval_rows(run_id: int, rows: Sequence[Dict], db_path: Optional[str] = None) -> bool:
    """Store report rows with image_id, tp, fp, fn, p, r, f1 keys"""
    try:
        conn = get_connection(db_path)
        if not conn:
            return False

        cursor = conn.cursor()
        cursor.executemany("""
            INSERT INTO eval_rows (run_id, image_id, tp, fp, fn, p, r, f1)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        """, [(run_id, str(r["image_id"]), int(r["tp"]), int(r["fp"]), int(r["fn"]),
               float(r["p"]), float(r["r"]), float(r["f1"])) for r in rows])

        conn.commit()
        conn.close()
        return True
    except Exception as e:
        logger.error(f"❌ Error recording eval rows: {e}")
        traceback.print_exc()
        return False


def log_event(run_id: int, event_type: str, event_data: Dict = None, db_path: Optional[str] = None) -> bool:
    """Log a run event (checkpoint written, early stop, ...)"""
    try:
        conn = get_connection(db_path)
        if not conn:
            return False

        cursor = conn.cursor()
        cursor.execute("""
            INSERT INTO events (run_id, event_type, event_data)
            VALUES (?, ?, ?)
        """, (run_id, event_type, json.dumps(event_data or {}, sort_keys=True)))

        conn.commit()
        conn.close()
        return True
    except Exception as e:
        logger.error(f"❌ Error logging event: {e}")
        return False


def get_run_summary(run_id: int, db_path: Optional[str] = None) -> Dict:
    """Run row plus its stage counts, eval rows and events"""
    try:
        conn = get_connection(db_path)
        if not conn:
            return {}

        cursor = conn.cursor()
        cursor.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,))
        run = cursor.fetchone()
        if not run:
            conn.close()
            return {}

        cursor.execute("""
            SELECT image_id, patches, proposals, survivors, final
            FROM stage_counts WHERE run_id = ? ORDER BY id
        """, (run_id,))
        stages = [dict(row) for row in cursor.fetchall()]

        cursor.execute("""
            SELECT image_id, tp, fp, fn, p, r, f1
            FROM eval_rows WHERE run_id = ? ORDER BY id
        """, (run_id,))
        evals = [dict(row) for row in cursor.fetchall()]

        cursor.execute("""
            SELECT event_type, event_data, timestamp
            FROM events WHERE run_id = ? ORDER BY id
        """, (run_id,))
        events = [{"event_type": row["event_type"], "event_data": json.loads(row["event_data"] or "{}"),
                   "timestamp": row["timestamp"]} for row in cursor.fetchall()]

        conn.close()

        return {
            "run_id": run["run_id"],
            "command": run["command"],
            "seed": run["seed"],
            "config": json.loads(run["config_json"] or "{}"),
            "started_at": run["started_at"],
            "ended_at": run["ended_at"],
            "status": run["status"],
            "stage_counts": stages,
            "eval_rows": evals,
            "events": events,
        }
    except Exception as e:
        logger.error(f"❌ Error getting run summary: {e}")
        traceback.print_exc()
        return {}


def list_runs(limit: int = 20, db_path: Optional[str] = None) -> List[Dict]:
    """Most recent runs first"""
    try:
        conn = get_connection(db_path)
        if not conn:
            return []

        cursor = conn.cursor()
        cursor.execute("""
            SELECT run_id, command, seed, started_at, ended_at, status
            FROM runs
            ORDER BY run_id DESC
            LIMIT ?
        """, (limit,))

        runs = [dict(row) for row in cursor.fetchall()]
        conn.close()
        return runs
    except Exception as e:
        logger.error(f"❌ Error listing runs: {e}")
        return []
