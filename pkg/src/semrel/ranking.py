"""NeuralNDCG: a differentiable NDCG built on a relaxed sorting operator.

Scores ``s`` of length ``n`` are turned into a soft permutation matrix whose
row ``u`` (1-based) is

    softmax(((n + 1 - 2u) * s - A_s @ 1) / tau),   A_s[u, v] = |s_u - s_v|

which approaches the hard descending-sort permutation as ``tau -> 0``. The
matrix is optionally Sinkhorn-balanced (log-space), applied to the gains of
the target relevances, discounted by ``1 / log2(j + 1)`` and normalised by
the ideal DCG. The loss is the negated NDCG so that it can be minimised.

Every tensor function here works on a batch: scores are ``(..., n)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import tape as T
from .core.tape import Tape, Var


@dataclass(frozen=True)
class SinkhornConfig:
    max_iters: int = 30
    tol: float = 1e-6
    enabled: bool = True


@dataclass
class SoftPermutation:
    P: np.ndarray
    tau: float
    sinkhorn_applied: bool = False
    converged: bool = True
    n_iters: int = 0


@dataclass(frozen=True)
class RankingTarget:
    """An ordering of semantic slots, most important first.

    ``relevance`` is aligned with ``order``: position ``p`` (1-based) gets
    relevance ``len(order) - p``. If a ``"T"`` slot is present it must be
    ranked first.
    """

    order: tuple[str, ...]

    def __post_init__(self):
        order = tuple(self.order)
        object.__setattr__(self, "order", order)
        if len(set(order)) != len(order) or not order:
            raise ValueError(f"ranking order must be a nonempty permutation, got {order}")
        if "T" in order and order[0] != "T":
            raise ValueError(f"text slot T must hold rank 1, got {order}")

    @classmethod
    def with_text_first(cls, fine_order: Sequence[str]) -> "RankingTarget":
        return cls(("T", *fine_order))

    @property
    def relevance(self) -> np.ndarray:
        n = len(self.order)
        return np.arange(n - 1, -1, -1, dtype=np.float64)

    def relevance_for(self, slots: Sequence[str]) -> np.ndarray:
        """Relevance vector laid out in ``slots`` order."""
        if sorted(slots) != sorted(self.order):
            raise ValueError(f"slots {tuple(slots)} do not match ranking {self.order}")
        pos = {s: i for i, s in enumerate(self.order)}
        n = len(self.order)
        return np.array([n - 1 - pos[s] for s in slots], dtype=np.float64)


def gain(s):
    return np.exp2(s) - 1.0


def discount(j):
    j = np.asarray(j, dtype=np.float64)
    if np.any(j < 1):
        raise ValueError(f"rank position must be >= 1, got {j}")
    out = 1.0 / np.log2(j + 1.0)
    return float(out) if out.ndim == 0 else out


def _rank_coefficients(n: int) -> np.ndarray:
    u = np.arange(1, n + 1, dtype=np.float64)
    return n + 1.0 - 2.0 * u


def soft_permutation_logits(scores: Var, tau: float) -> Var:
    """Log of the row-stochastic soft sort, shape ``(..., n, n)``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    n = scores.value.shape[-1]
    s_col = T.reshape(scores, scores.value.shape[:-1] + (1, n))
    pairwise = T.abs_(T.reshape(scores, scores.value.shape + (1,)) - s_col)
    row_sums = T.reshape(T.sum_(pairwise, axis=-1), scores.value.shape[:-1] + (1, n))
    coef = _rank_coefficients(n)[:, None]
    return T.log_softmax((s_col * coef - row_sums) * (1.0 / tau), axis=-1)


def sinkhorn_log(logP: Var, max_iters: int = 30, tol: float = 1e-6) -> tuple[Var, bool, int]:
    """Alternate column/row normalisation in log-space.

    Stops once every row and column sum is within ``tol`` of 1 or after
    ``max_iters`` sweeps; returns ``(logP, converged, sweeps)``.
    """
    return T.sinkhorn_log(logP, max_iters, tol)


def soft_permutation(scores, tau: float) -> SoftPermutation:
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    logP = soft_permutation_logits(Tape().constant(scores), tau)
    return SoftPermutation(np.exp(logP.value), float(tau))


def sinkhorn(perm: SoftPermutation, max_iters: int = 30, tol: float = 1e-6) -> SoftPermutation:
    P = np.asarray(perm.P, dtype=np.float64)
    if np.any(P <= 0):
        raise ValueError("sinkhorn needs strictly positive entries")
    logP, converged, n_iters = sinkhorn_log(Tape().constant(np.log(P)), max_iters, tol)
    return SoftPermutation(np.exp(logP.value), perm.tau, True, converged, n_iters)


def ideal_dcg(relevance: np.ndarray) -> np.ndarray:
    rel = np.sort(np.asarray(relevance, dtype=np.float64), axis=-1)[..., ::-1]
    n = rel.shape[-1]
    return (gain(rel) * discount(np.arange(1, n + 1))).sum(axis=-1)


def neural_ndcg(scores: Var, relevance, tau: float = 1.0, sinkhorn_cfg: SinkhornConfig = SinkhornConfig()):
    """Differentiable NDCG per sample.

    Returns ``(ndcg, info)`` where ``ndcg`` has the batch shape of
    ``scores``. ``info`` carries ``degenerate`` (targets whose relevances
    are all equal; their NDCG is the constant 1) and Sinkhorn diagnostics.
    """
    relevance = np.broadcast_to(np.asarray(relevance, dtype=np.float64), scores.value.shape)
    n = scores.value.shape[-1]
    if relevance.shape[-1] != n:
        raise ValueError(f"scores have {n} slots but target has {relevance.shape[-1]}")
    degenerate = np.all(relevance == relevance[..., :1], axis=-1)

    logP = soft_permutation_logits(scores, tau)
    converged, n_iters = True, 0
    if sinkhorn_cfg.enabled:
        logP, converged, n_iters = sinkhorn_log(logP, sinkhorn_cfg.max_iters, sinkhorn_cfg.tol)
    P = T.exp(logP)
    gains = gain(relevance)[..., None, :]
    disc = discount(np.arange(1, n + 1))
    sorted_gains = T.sum_(P * gains, axis=-1)
    dcg = T.sum_(sorted_gains * disc, axis=-1)
    idcg = ideal_dcg(relevance)
    safe = np.where(degenerate, 1.0, idcg)
    ndcg = dcg * np.where(degenerate, 0.0, 1.0 / safe) + degenerate.astype(np.float64)
    info = {"degenerate": degenerate, "sinkhorn_converged": converged, "sinkhorn_iters": n_iters}
    return ndcg, info


def neural_ndcg_loss(
    scores,
    target,
    tau: float = 1.0,
    sinkhorn_cfg: SinkhornConfig = SinkhornConfig(),
    *,
    return_info: bool = False,
):
    """Negated NeuralNDCG of one score vector against a target.

    ``target`` is a :class:`RankingTarget` (scores laid out in its
    ``order``) or a relevance vector aligned with ``scores``. With a tape
    variable as ``scores`` the result is a tape variable; otherwise a float.
    """
    relevance = target.relevance if isinstance(target, RankingTarget) else np.asarray(target, dtype=np.float64)
    on_tape = isinstance(scores, Var)
    s = scores if on_tape else Tape().constant(scores)
    if s.value.shape[-1] != relevance.shape[-1]:
        raise ValueError(f"scores have {s.value.shape[-1]} slots but target has {relevance.shape[-1]}")
    ndcg, info = neural_ndcg(s, relevance, tau, sinkhorn_cfg)
    loss = -ndcg
    if not on_tape:
        loss = float(loss.value)
    return (loss, info) if return_info else loss


def exact_ndcg(scores, relevance) -> float:
    """NDCG of the hard descending sort of ``scores`` (ties by index)."""
    scores = np.asarray(scores, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    n = len(scores)
    dcg = float((gain(relevance[order]) * discount(np.arange(1, n + 1))).sum())
    idcg = float(ideal_dcg(relevance))
    return 1.0 if idcg == 0 else dcg / idcg


def hard_sort_matrix(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    P = np.zeros((len(scores), len(scores)))
    P[np.arange(len(scores)), order] = 1.0
    return P


def all_orderings(n: int):
    return itertools.permutations(range(n))


def kendall_tau(order_a: Sequence, order_b: Sequence) -> float:
    """Kendall tau-a between two orderings of the same items."""
    pos_a = {x: i for i, x in enumerate(order_a)}
    pos_b = {x: i for i, x in enumerate(order_b)}
    if pos_a.keys() != pos_b.keys():
        raise ValueError("orderings cover different items")
    items = list(order_a)
    n = len(items)
    if n < 2:
        return 1.0
    total = 0
    for x, y in itertools.combinations(items, 2):
        total += int(np.sign(pos_a[x] - pos_a[y]) * np.sign(pos_b[x] - pos_b[y]))
    return total / math.comb(n, 2)
