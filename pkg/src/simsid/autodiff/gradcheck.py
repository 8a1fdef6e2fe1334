from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import ShapeError, Tensor


def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x.copy())).item()
        flat[i] = orig - eps
        fm = f(Tensor(x.copy())).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(t)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    if not out.requires_grad:
        return np.zeros_like(t.data)
    out.backward()
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    eps: float = 1e-5,
    expected: np.ndarray | None = None,
) -> float:
    """Max over coordinates of |analytic - reference| / max(1, |analytic|).

    The reference is the central finite difference of ``f`` unless
    ``expected`` is given; ops whose backward is deliberately not the
    derivative of their forward (stop-gradient, straight-through top-k) are
    checked against their declared gradient that way.
    """
    x = np.asarray(x, dtype=np.float64)
    analytic = analytic_grad(f, x)
    reference = numerical_grad(f, x, eps) if expected is None else np.asarray(expected, dtype=np.float64)
    err = np.abs(analytic - reference) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
