"""RMSProp and the one-shot plateau learning-rate drop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


def rmsprop_update(param, grad, acc, lr: float, rho: float = 0.9, eps: float = 1e-8):
    """One RMSProp step on plain arrays; returns ``(new_param, new_acc)``."""
    acc = rho * acc + (1.0 - rho) * grad * grad
    return param - lr * grad / (np.sqrt(acc) + eps), acc


@dataclass
class PlateauSchedule:
    """Drop the learning rate once when validation loss stops improving.

    The rate goes from ``initial`` to ``dropped`` after ``patience``
    consecutive epochs without a strict improvement on the best loss so
    far, and never changes again afterwards.
    """

    initial: float = 1e-3
    dropped: float = 1e-4
    patience: int = 3
    best: float = float("inf")
    stale_epochs: int = 0
    has_dropped: bool = False
    drop_epoch: int | None = None
    epochs_seen: int = 0

    @property
    def learning_rate(self) -> float:
        return self.dropped if self.has_dropped else self.initial

    def update(self, validation_loss: float) -> float:
        self.epochs_seen += 1
        if validation_loss < self.best:
            self.best = validation_loss
            self.stale_epochs = 0
        else:
            self.stale_epochs += 1
        if not self.has_dropped and self.stale_epochs >= self.patience:
            self.has_dropped = True
            self.drop_epoch = self.epochs_seen
        return self.learning_rate


def lr_schedule(validation_losses: Sequence[float], schedule: PlateauSchedule | None = None) -> float:
    """Replay a list of per-epoch validation losses through a fresh schedule."""
    if not validation_losses:
        raise ValueError("need at least one recorded epoch")
    schedule = schedule or PlateauSchedule()
    for loss in validation_losses:
        schedule.update(loss)
    return schedule.learning_rate


@dataclass
class RMSProp:
    params: Sequence[Tensor]
    schedule: PlateauSchedule = field(default_factory=PlateauSchedule)
    rho: float = 0.9
    eps: float = 1e-8
    accumulators: list = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.accumulators = [np.zeros_like(p.data) for p in self.params]

    @property
    def learning_rate(self) -> float:
        return self.schedule.learning_rate

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        lr = self.learning_rate
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            grad = p.grad.astype(p.data.dtype, copy=False)
            p.data, self.accumulators[i] = rmsprop_update(
                p.data, grad, self.accumulators[i], lr, self.rho, self.eps
            )
