"""SGD with Nesterov momentum and the stepped learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractViolation


@dataclass
class OptimizerState:
    """Per-parameter momentum buffers, initialized to zero."""

    momentum: float = 0.9
    nesterov: bool = True
    buffers: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], momentum: float = 0.9,
                   nesterov: bool = True) -> "OptimizerState":
        return cls(momentum=momentum, nesterov=nesterov,
                   buffers=[np.zeros(p.shape) for p in params])


def sgd_nesterov_step(params: list[Tensor], grads: list, state: OptimizerState,
                      lr: float) -> None:
    """One in-place update step.

    buffer <- momentum * buffer + grad
    param  <- param - lr * (grad + momentum * buffer)   (Nesterov)
    param  <- param - lr * buffer                       (plain momentum)
    """
    if len(params) != len(grads) or len(params) != len(state.buffers):
        raise ContractViolation("params, grads and buffers must align")
    m = state.momentum
    for p, g, buf in zip(params, grads, state.buffers):
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or buf.shape != p.shape:
            raise ContractViolation(
                f"shape mismatch: param {p.shape}, grad {g.shape}, buffer {buf.shape}")
        buf *= m
        buf += g
        step = g + m * buf if state.nesterov else buf
        p.data -= lr * step


@dataclass(frozen=True)
class LrSchedule:
    """Base rate divided by a factor at each listed epoch."""

    base_lr: float = 0.1
    drop_epochs: tuple[int, ...] = (20, 30, 35)
    drop_factor: float = 10.0


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ContractViolation("epoch must be nonnegative")
    drops = sum(1 for d in schedule.drop_epochs if d <= epoch)
    return schedule.base_lr / schedule.drop_factor**drops
