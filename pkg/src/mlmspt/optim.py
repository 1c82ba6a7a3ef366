"""Adam with bias correction and the step learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError


@dataclass
class OptimizerState:
    base_lr: float = 3e-4
    step_size: int = 20
    gamma: float = 0.7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_at(self, epoch: int) -> float:
        return step_lr(epoch, self.base_lr, self.step_size, self.gamma)


def step_lr(epoch: int, base_lr: float, step_size: int, gamma: float) -> float:
    """lr = base_lr * gamma ** floor(epoch / step_size)."""
    if step_size < 1:
        raise ContractError(f"step_size must be >= 1, got {step_size}")
    if not 0 < gamma <= 1:
        raise ContractError(f"gamma must lie in (0, 1], got {gamma}")
    return base_lr * gamma ** (epoch // step_size)


def adam_step(params, state: OptimizerState, lr: float) -> None:
    """One in-place Adam update of every tensor in ``params`` (name -> Tensor).

    Gradients are read but not cleared.
    """
    if lr < 0 or math.isnan(lr):
        raise ContractError(f"learning rate must be non-negative, got {lr}")
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for parameter(s) {missing}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - p.data.dtype.type(lr) * update.astype(p.data.dtype, copy=False)
