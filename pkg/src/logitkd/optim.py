"""SGD with momentum and coupled weight decay, step decay, and the distillation warm-up."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class SgdState:
    """``v <- momentum * v + g + weight_decay * theta``; ``theta <- theta - lr * v``."""

    lr0: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: list = field(default_factory=list)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr=None):
        """Update ``params`` in place and return them."""
        lr = self.lr0 if lr is None else lr
        if len(params) != len(grads):
            raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
        if not self.velocity:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            if p.shape != g.shape or p.shape != v.shape:
                raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, "
                                 f"velocity {v.shape}")
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p
            p -= lr * v
        return params


def sgd_step(state: SgdState, params, grads, lr=None):
    return state.step(params, grads, lr)


@dataclass(frozen=True)
class Schedule:
    total_epochs: int = 240
    decay_start_epoch: float = 150
    decay_period: float = 30
    decay_factor: float = 0.1
    warmup_epochs: int = 20

    def __post_init__(self):
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.decay_period <= 0 or self.total_epochs < 1 or self.warmup_epochs < 0:
            raise ValueError("invalid schedule")

    def boundaries(self) -> list[float]:
        out, b = [], float(self.decay_start_epoch)
        while b < self.total_epochs:
            out.append(b)
            b += self.decay_period
        return out


CIFAR_SCHEDULE = Schedule(240, 150, 30, 0.1, 20)
# Same shape at a quarter of the length: decays land on epochs 38, 45 and 53.
DESK_SCHEDULE = Schedule(60, 37.5, 7.5, 0.1, 5)


def lr_at(schedule: Schedule, lr0: float, epoch: int) -> float:
    """``lr0 * decay_factor ** (boundaries already passed at this epoch)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    passed = sum(1 for b in schedule.boundaries() if epoch >= b)
    return lr0 * schedule.decay_factor ** passed


def warmup_factor(schedule: Schedule, epoch: int) -> float:
    """Linear ramp ``min(epoch / warmup_epochs, 1)``; 1 when there is no warm-up."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if schedule.warmup_epochs == 0:
        return 1.0
    return min(epoch / schedule.warmup_epochs, 1.0)
