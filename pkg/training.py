"""
Training Helpers
Schedules, optimizer construction, early stopping, history tables and
checkpoints shared by the proposal network and the candidate classifier.
"""

import logging
import math
import random
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int
    batch_size: int
    lr0: float
    lrf: float
    weight_decay: float
    close_mosaic: int = 20
    patience: Optional[int] = None
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 <= 0 or self.lrf <= 0:
            raise ValueError(f"learning rates must be positive, got {self.lr0} -> {self.lrf}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.patience is not None and self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")


PROPOSER_FULL = TrainSchedule(epochs=300, batch_size=960, lr0=1e-3, lrf=1e-5, weight_decay=5e-4, close_mosaic=20)
PROPOSER_DESK = TrainSchedule(epochs=30, batch_size=8, lr0=1e-3, lrf=1e-5, weight_decay=5e-4, close_mosaic=20)
CLASSIFIER_FULL = TrainSchedule(epochs=400, batch_size=960, lr0=3e-4, lrf=1e-6, weight_decay=1e-5, patience=60)
CLASSIFIER_DESK = TrainSchedule(epochs=50, batch_size=64, lr0=3e-4, lrf=1e-6, weight_decay=1e-5, patience=60)


def cosine_lr(epoch: int, epochs: int, lr0: float, lrf: float) -> float:
    """Cosine annealing from lr0 at epoch 0 to lrf at the last epoch."""
    if epochs <= 1:
        return lr0
    t = min(max(epoch, 0), epochs - 1) / (epochs - 1)
    return lrf + 0.5 * (lr0 - lrf) * (1.0 + math.cos(math.pi * t))


def make_optimizer(model: torch.nn.Module, schedule: TrainSchedule):
    """AdamW with a per-epoch cosine LambdaLR; call `scheduler.step()` once per epoch."""
    optimizer = torch.optim.AdamW(model.parameters(), lr=schedule.lr0, weight_decay=schedule.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda e: cosine_lr(e, schedule.epochs, schedule.lr0, schedule.lrf) / schedule.lr0,
    )
    return optimizer, scheduler


class EarlyStopping:
    """Stops once the monitored value has not improved for `patience` epochs."""

    def __init__(self, patience: int = 60):
        self.patience = patience
        self.best_fitness = -math.inf
        self.best_epoch = 0
        self.improved = False

    def step(self, epoch: int, fitness: float) -> bool:
        if fitness is None or math.isnan(fitness):
            self.improved = False
            return False
        self.improved = fitness > self.best_fitness
        if self.improved:
            self.best_fitness = fitness
            self.best_epoch = epoch
        stop = (epoch - self.best_epoch) >= self.patience
        if stop:
            logger.info(f"⏹️ Early stopping at epoch {epoch}: best {self.best_fitness:.4f} at epoch {self.best_epoch}")
        return stop


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def write_history_csv(history: Sequence[Dict], path: str, columns: List[str]) -> None:
    pd.DataFrame(list(history), columns=columns).to_csv(path, index=False)


def save_checkpoint(path: str, model: torch.nn.Module, config: Dict) -> None:
    torch.save({"state_dict": model.state_dict(), "config": config}, path)
    logger.info(f"💾 Saved checkpoint {path}")


def load_checkpoint(path: str) -> Dict:
    return torch.load(path, map_location="cpu", weights_only=True)
