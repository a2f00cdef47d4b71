import pytest

from database import (create_run, end_run, get_run_summary, init_database, list_runs, log_event, record_eval_rows,
                      record_stage_counts)
from pipeline import RunStats


@pytest.fixture
def ledger(tmp_path):
    path = str(tmp_path / "ledger" / "runs.db")
    assert init_database(path)
    return path


def test_run_lifecycle(ledger):
    run_id = create_run("evaluate", 7, {"seed": 7, "eval.rule": "center:30"}, ledger)
    assert run_id > 0
    assert record_stage_counts(run_id, [RunStats("img", patches=9, proposals=12, rejected=4, survivors=8, final=6)],
                               ledger)
    assert record_eval_rows(run_id, [{"image_id": "ALL", "tp": 3, "fp": 1, "fn": 2,
                                      "p": 0.75, "r": 0.6, "f1": 2 / 3}], ledger)
    assert log_event(run_id, "checkpoint", {"path": "proposer.pt"}, ledger)
    assert end_run(run_id, "ok", ledger)

    summary = get_run_summary(run_id, ledger)
    assert (summary["command"], summary["seed"], summary["status"]) == ("evaluate", 7, "ok")
    assert summary["config"] == {"seed": 7, "eval.rule": "center:30"}
    assert summary["stage_counts"] == [{"image_id": "img", "patches": 9, "proposals": 12, "survivors": 8, "final": 6}]
    assert summary["eval_rows"][0]["tp"] == 3 and summary["eval_rows"][0]["f1"] == pytest.approx(2 / 3)
    assert summary["events"][0]["event_data"] == {"path": "proposer.pt"}
    assert summary["ended_at"] is not None


def test_list_runs_newest_first(ledger):
    ids = [create_run(cmd, 0, {}, ledger) for cmd in ("synth", "tile", "infer")]
    runs = list_runs(db_path=ledger)
    assert [r["run_id"] for r in runs] == ids[::-1]
    assert [r["status"] for r in runs] == ["running"] * 3
    assert len(list_runs(limit=2, db_path=ledger)) == 2


def test_unknown_run(ledger):
    assert get_run_summary(999, ledger) == {}


def test_unusable_path_fails_softly(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    path = str(blocker / "runs.db")
    assert init_database(path) is False
    assert create_run("synth", 0, {}, path) == -1
    assert end_run(1, "ok", path) is False
    assert list_runs(db_path=path) == []
