"""Adam with decoupled weight decay, and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .tensor import Parameter

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adam_step(p: Parameter, lr: float, weight_decay: float = 0.0) -> Parameter:
    """Apply one in-place Adam update to ``p`` and clear its gradient."""
    if p.grad is None:
        raise ValueError(f"adam_step: parameter {p!r} has no gradient")
    g = p.grad
    if weight_decay:
        p.data *= 1.0 - lr * weight_decay
    p.step += 1
    p.m *= BETA1
    p.m += (1.0 - BETA1) * g
    p.v *= BETA2
    p.v += (1.0 - BETA2) * (g * g)
    m_hat = p.m / (1.0 - BETA1**p.step)
    v_hat = p.v / (1.0 - BETA2**p.step)
    p.data -= lr * m_hat / (np.sqrt(v_hat) + EPS)
    p.grad = None
    return p


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self) -> None:
        # parameters untouched by this backward pass keep their state
        for p in self.params:
            if p.grad is not None:
                adam_step(p, self.lr, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float) -> float:
    if total <= 0 or t >= total:
        return lr_min
    t = max(t, 0.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))
