"""Value-level vector primitives on 1-D/2-D float64 arrays.

These mirror the differentiable operations in :mod:`semrel.core.tape` for
single samples and do the dimension checking the model code relies on.
"""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np


class DegenerateFeatureWarning(RuntimeWarning):
    """A zero-norm vector reached cosine similarity."""


def as_vec(x, name: str = "x") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a nonempty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def as_mat(x, name: str = "W") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"{name} must be a nonempty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def linear(x, W, b) -> np.ndarray:
    x, W, b = as_vec(x), as_mat(W), as_vec(b, "b")
    if W.shape[1] != x.shape[0]:
        raise ValueError(f"linear: W has {W.shape[1]} cols but x has dim {x.shape[0]}")
    if b.shape[0] != W.shape[0]:
        raise ValueError(f"linear: b has dim {b.shape[0]} but W has {W.shape[0]} rows")
    return W @ x + b


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax(x) -> np.ndarray:
    x = as_vec(x)
    e = np.exp(x - x.max())
    return e / e.sum()


def log_softmax(x) -> np.ndarray:
    x = as_vec(x)
    z = x - x.max()
    return z - np.log(np.exp(z).sum())


def mean_pool(tokens: Sequence) -> np.ndarray:
    if len(tokens) == 0:
        raise ValueError("mean_pool: empty token list")
    arr = np.asarray([as_vec(t, "token") for t in tokens])
    return arr.mean(axis=0)


def cosine(a, b, *, return_flag: bool = False):
    """Cosine similarity clamped to [-1, 1].

    A zero-norm input gives 0 and a :class:`DegenerateFeatureWarning`; with
    ``return_flag`` the result is ``(value, degenerate)`` and no warning is
    emitted.
    """
    a, b = as_vec(a, "a"), as_vec(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"cosine: dims {a.shape[0]} and {b.shape[0]} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    degenerate = na == 0.0 or nb == 0.0
    if degenerate:
        value = 0.0
        if not return_flag:
            warnings.warn("cosine of a zero-norm vector; returning 0", DegenerateFeatureWarning, stacklevel=2)
    else:
        value = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return (value, degenerate) if return_flag else value


def mse(a, b) -> float:
    a, b = as_vec(a, "a"), as_vec(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"mse: dims {a.shape[0]} and {b.shape[0]} differ")
    return float(np.mean((a - b) ** 2))


def cross_entropy(logits, label: int) -> float:
    logits = as_vec(logits, "logits")
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    return float(-log_softmax(logits)[label])
