from __future__ import annotations

from typing import Callable

import numpy as np

from .tape import Tape, Var


def tape_grad(f: Callable[[Var], Var], x) -> tuple[float, np.ndarray]:
    """Value and reverse-mode gradient of scalar ``f`` at ``x``."""
    tape = Tape()
    xv = tape.var(x)
    out = f(xv)
    tape.backward(out)
    grad = xv.grad if xv.grad is not None else np.zeros_like(xv.value)
    return float(out.value), grad


def numeric_grad(f: Callable[[Var], Var], x, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tape().constant(x)).value)
        flat[i] = orig - eps
        lo = float(f(Tape().constant(x)).value)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(f: Callable[[Var], Var], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a tape variable to a scalar variable. Callers keep ``x`` away
    from kinks (ReLU zero crossings, score ties).
    """
    _, analytic = tape_grad(f, x)
    return relative_error(analytic, numeric_grad(f, x, eps))
