"""SGD with per-parameter gradient multipliers, plus the plain/momentum
baselines.

The multiplier is applied to the raw gradient *before* momentum
accumulation: at momentum 0 this is exactly the re-parameterized update
w <- w - lr * gm * g, and at momentum > 0 it corresponds to each fused
branch's buffer being scaled by its own constant.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError

SCHEDULES = ("constant", "cosine")


@dataclass
class OptimConfig:
    lr: float
    momentum: float = 0.0
    schedule: str = "constant"
    total_steps: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ShapeError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ShapeError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.schedule not in SCHEDULES:
            raise ShapeError(f"unknown schedule {self.schedule!r}, expected one of {SCHEDULES}")
        if self.schedule == "cosine" and self.total_steps < 1:
            raise ShapeError("cosine schedule requires total_steps >= 1")
        if self.weight_decay != 0.0:
            raise ShapeError("weight decay is fixed at 0 (decay on fused weights is not equivalent to decay on branch weights)")


@dataclass
class OptimState:
    buffers: dict = field(default_factory=dict)
    step_count: int = 0


def lr_at(cfg: OptimConfig, step: int) -> float:
    """Learning rate at a given step; cosine clamps past total_steps."""
    if cfg.schedule == "constant":
        return cfg.lr
    t = min(step, cfg.total_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t / cfg.total_steps))


def step(params, gm, cfg: OptimConfig, state: OptimState) -> None:
    """One update over (ParamId, Tensor) pairs. gm may be None (all ones)."""
    eta = lr_at(cfg, state.step_count)
    for pid, tensor in params:
        g = tensor.grad
        if g is None:
            raise NumericalError(f"missing gradient for parameter {pid}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {pid}")
        mult = gm.get(pid) if gm is not None else None
        if mult is not None:
            if np.broadcast_shapes(g.shape, mult.shape) != g.shape:
                raise ShapeError(f"multiplier shape {mult.shape} not broadcastable to parameter {pid} of shape {g.shape}")
            g = g * mult
        if cfg.momentum > 0.0:
            buf = state.buffers.get(pid)
            buf = g.copy() if buf is None else cfg.momentum * buf + g
            state.buffers[pid] = buf
            g = buf
        tensor.data = tensor.data - eta * g
    state.step_count += 1
