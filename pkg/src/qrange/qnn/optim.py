"""SGD with momentum and the two learning-rate schedules used in training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..tensor import ShapeError


@dataclass(frozen=True)
class StepDecay:
    milestones: tuple[int, ...] = (30, 60)
    factor: float = 0.1


@dataclass(frozen=True)
class CosineAnneal:
    lr_final: float = 1e-5


@dataclass(frozen=True)
class Constant:
    pass


def lr_at(schedule, epoch: int, total_epochs: int, lr0: float) -> float:
    if not 0 <= epoch < max(total_epochs, 1):
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if isinstance(schedule, StepDecay):
        passed = sum(1 for m in schedule.milestones if m <= epoch)
        return lr0 * schedule.factor**passed
    if isinstance(schedule, CosineAnneal):
        if total_epochs <= 1:
            return lr0
        cos = (1.0 + math.cos(math.pi * epoch / (total_epochs - 1))) / 2.0
        return schedule.lr_final + (lr0 - schedule.lr_final) * cos
    return lr0


@dataclass
class SGD:
    """``v <- mu*v + g + wd*w``; ``w <- w - lr*v``. Updates FP32 masters in place."""

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, w in params.items():
            g = grads[name]
            if g.shape != w.shape:
                raise ShapeError(f"{name}: gradient {g.shape} vs parameter {w.shape}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(w)
            v = self.momentum * v + g + self.weight_decay * w
            self.velocity[name] = v.astype(w.dtype)
            # in-place so layers keep referencing the same array
            w -= (self.lr * v).astype(w.dtype)


def sgd_step(opt: SGD, params, grads):
    opt.step(params, grads)
    return params
