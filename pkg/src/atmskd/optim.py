"""AdamW with decoupled weight decay, cosine warm restarts, gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UsageError
from .tensor import Tensor


@dataclass
class WarmRestarts:
    lr_base: float
    T_0: int = 10
    T_mult: int = 2
    eta_min: float | None = None

    def __post_init__(self):
        if self.eta_min is None:
            self.eta_min = self.lr_base / 100.0


def lr_at(schedule: WarmRestarts, epoch: float) -> float:
    """Learning rate at ``epoch`` under cosine annealing with warm restarts."""
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    t, cycle = float(epoch), float(schedule.T_0)
    while t >= cycle:
        t -= cycle
        cycle *= schedule.T_mult
    return schedule.eta_min + (schedule.lr_base - schedule.eta_min) * (1.0 + math.cos(math.pi * t / cycle)) / 2.0


class AdamW:
    """Adaptive moments with bias correction; decay multiplies weights directly."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise UsageError(f"missing gradient for parameter of shape {p.shape}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(params: Sequence[Tensor], state: AdamW) -> None:
    """Apply one AdamW update to ``params`` using their populated gradients."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise UsageError("optimizer state was built for a different parameter list")
    state.step()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> tuple[float, bool]:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
        return total, True
    return total, False
