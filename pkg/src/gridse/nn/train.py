"""Mini-batch training loop shared by the estimator and the forecasters."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from gridse.nn.model import Sequential
from gridse.nn.optim import AdamState, adam_step, loss


class TrainingError(RuntimeError):
    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_nrmse: float | None
    train_time: float  # cumulative seconds spent in optimizer epochs


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def train_loss(self):
        return [r.train_loss for r in self.records]

    @property
    def valid_nrmse(self):
        return [r.valid_nrmse for r in self.records]


def fit(model: Sequential, x, y, epochs: int, batch_size: int = 32, lr: float = 1e-3,
        seed=None, loss_kind: str = "MAE", state: AdamState | None = None,
        on_epoch: Callable[[int, float], float | None] | None = None,
        history: History | None = None) -> tuple[Sequential, History, AdamState]:
    """Shuffled mini-batch Adam.

    ``seed`` drives shuffling and dropout through one generator, consumed in a
    fixed order, so training is reproducible and can be resumed by passing the
    returned ``state`` together with the same generator.  ``on_epoch(epoch,
    train_loss)`` may return a validation score to record.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = state or AdamState(lr=lr)
    history = history if history is not None else History()
    n = len(x)
    params = model.parameters()
    elapsed = history.records[-1].train_time if history.records else 0.0
    start_epoch = len(history.records)
    for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            out, cache = model.forward(x[idx], "train", rng)
            value, dy = loss(loss_kind, out, y[idx])
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch)
            grads, _ = model.backward(cache, dy)
            adam_step(params, grads, state)
            total += value * len(idx)
        elapsed += time.perf_counter() - t0
        train_loss = total / n
        score = on_epoch(epoch, train_loss) if on_epoch else None
        history.records.append(EpochRecord(epoch, train_loss, score, elapsed))
    return model, history, state
