"""Semantic relational reasoning head and the classic-relation baselines.

Features are laid out as ``X[b, slot, :]`` with the text slot first and
the fine-grained slots after it, e.g. ``("T", "A", "E", "I")``.

* importance: a shared two-layer network scores every slot; a softmax
  across the slots gives ``alpha``.
* complementarity: ``beta_M = cos(F_T, F_M)`` and ``C_M = beta_M * F_M``.
* fusion: ``F_Comp = sum_M alpha_M * [F_T, C_M]`` over the fine slots only.
* inconsistency: ``I_M = F_T - F_M``, ``gamma_M = mse(F_T, F_M)``,
  ``F_Incons = sum_M gamma_M * I_M``.
* classifier: ``W (F_Comp - lift(F_Incons)) + b`` where ``lift`` zero-pads
  the penalty into the text half.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .core import tape as T
from .core.tape import Tape, Var
from .ranking import RankingTarget, SinkhornConfig, neural_ndcg

TEXT_SLOT = "T"
DEFAULT_FINE_SLOTS = ("A", "E", "I")
CLASSIC_MODES = ("Or", "And", "Not", "Combination")
RELATIONS = ("importance", "complementarity", "inconsistency")


@dataclass
class SemanticBundle:
    F_T: np.ndarray
    fine: dict[str, np.ndarray]

    def __post_init__(self):
        self.F_T = np.asarray(self.F_T, dtype=np.float64)
        self.fine = {k: np.asarray(v, dtype=np.float64) for k, v in self.fine.items()}
        if not self.fine:
            raise ValueError("bundle needs at least one fine-grained slot")
        d = self.F_T.shape
        for name, v in self.fine.items():
            if v.shape != d:
                raise ValueError(f"slot {name} has shape {v.shape}, text feature has {d}")

    @property
    def dim(self) -> int:
        return self.F_T.shape[0]

    @property
    def slots(self) -> tuple[str, ...]:
        return (TEXT_SLOT, *self.fine)

    def stack(self) -> np.ndarray:
        """(n_slots, d) array, text first."""
        return np.stack([self.F_T, *self.fine.values()])


@dataclass
class SrrParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W_cls: np.ndarray
    b_cls: np.ndarray

    @classmethod
    def init(cls, d: int, K: int, h: int | None = None, rng=None) -> "SrrParams":
        return cls(**init_params("srr", d, K, h=h, rng=rng))

    def to_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def dims(self) -> tuple[int, int, int]:
        """(d, h, K)"""
        return self.W1.shape[1], self.W1.shape[0], self.W_cls.shape[0]


@dataclass
class SrrOutput:
    alpha: np.ndarray
    beta: dict[str, float]
    gamma: dict[str, float]
    F_Comp: np.ndarray
    F_Incons: np.ndarray
    logits: np.ndarray
    degenerate: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Variant:
    """Which head to build.

    ``kind`` is ``"srr"``, ``"concat"`` (plain concatenation, no relational
    reasoning) or one of :data:`CLASSIC_MODES`. ``drop_relation`` removes
    one SRR relation.
    """

    kind: str = "srr"
    drop_relation: str | None = None

    def __post_init__(self):
        if self.kind not in ("srr", "concat", *CLASSIC_MODES):
            raise ValueError(f"unknown model kind {self.kind!r}; expected srr, concat or one of {CLASSIC_MODES}")
        if self.drop_relation is not None:
            if self.kind != "srr":
                raise ValueError("drop_relation only applies to the srr head")
            if self.drop_relation not in RELATIONS:
                raise ValueError(f"unknown relation {self.drop_relation!r}; expected one of {RELATIONS}")

    @property
    def has_importance(self) -> bool:
        return self.kind == "srr" and self.drop_relation != "importance"

    @property
    def label(self) -> str:
        if self.kind == "srr":
            return "srr" if self.drop_relation is None else f"srr-no-{self.drop_relation}"
        return self.kind


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    kind: str, d: int, K: int, h: int | None = None, n_fine: int = 3, rng=None
) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) initialisation for the named head."""
    rng = np.random.default_rng(rng)
    if kind == "srr":
        h = h or max(1, d // 2)
        return {
            "W1": _uniform(rng, d, (h, d)),
            "b1": _uniform(rng, d, (h,)),
            "W2": _uniform(rng, h, (1, h)),
            "b2": _uniform(rng, h, (1,)),
            "W_cls": _uniform(rng, 2 * d, (K, 2 * d)),
            "b_cls": _uniform(rng, 2 * d, (K,)),
        }
    if kind == "concat":
        n_in = (n_fine + 1) * d
        return {"W_cls": _uniform(rng, n_in, (K, n_in)), "b_cls": _uniform(rng, n_in, (K,))}
    if kind in ("Or", "And"):
        return {"W_cls": _uniform(rng, d, (K, d)), "b_cls": _uniform(rng, d, (K,))}
    if kind in ("Not", "Combination"):
        n_in = n_fine * d if kind == "Not" else (n_fine + 2) * d
        return {
            "W_rel": _uniform(rng, n_in, (d, n_in)),
            "b_rel": _uniform(rng, n_in, (d,)),
            "W_cls": _uniform(rng, d, (K, d)),
            "b_cls": _uniform(rng, d, (K,)),
        }
    raise ValueError(f"unknown model kind {kind!r}")


# batched tape-level pieces; X is (B, S, d) with the text slot at index 0


def importance_logits(X: Var, p: Mapping[str, Var]) -> Var:
    d = X.value.shape[-1]
    if p["W1"].value.shape[1] != d:
        raise ValueError(f"weight network expects dim {p['W1'].value.shape[1]}, features have {d}")
    h = T.relu(T.linear(X, p["W1"], p["b1"]))
    out = T.linear(h, p["W2"], p["b2"])
    return T.reshape(out, out.value.shape[:-1])


def importance_scores(X: Var, p: Mapping[str, Var]) -> Var:
    return T.softmax(importance_logits(X, p), axis=-1)


def complementarity_terms(X: Var, drop: bool = False) -> tuple[Var, Var]:
    """(beta (B, M), C (B, M, d))."""
    F_T, F_fine = X[:, :1, :], X[:, 1:, :]
    if drop:
        return X.tape.constant(np.ones(F_fine.value.shape[:-1])), F_fine
    beta = T.cosine(F_T, F_fine, axis=-1)
    return beta, F_fine * T.reshape(beta, beta.value.shape + (1,))


def fuse(F_T: Var, C: Var, weights: Var) -> Var:
    """sum_M w_M * concat(F_T, C_M) -> (B, 2d)."""
    B, M, d = C.value.shape
    paired = T.concat([T.broadcast_to(F_T, (B, M, d)), C], axis=-1)
    return T.sum_(paired * T.reshape(weights, (B, M, 1)), axis=1)


def inconsistency_terms(X: Var) -> tuple[Var, Var, Var]:
    """(gamma (B, M), I (B, M, d), F_Incons (B, d))."""
    I = X[:, :1, :] - X[:, 1:, :]
    gamma = T.mse(X[:, :1, :], X[:, 1:, :], axis=-1)
    F_incons = T.sum_(I * T.reshape(gamma, gamma.value.shape + (1,)), axis=1)
    return gamma, I, F_incons


def lift_penalty(F_incons: Var) -> Var:
    """Zero-pad a (B, d) penalty into the text half of a (B, 2d) feature."""
    return T.concat([F_incons, np.zeros(F_incons.value.shape)], axis=-1)


def classify_logits(F_comp: Var, F_incons: Var | None, p: Mapping[str, Var]) -> Var:
    z = F_comp if F_incons is None else F_comp - lift_penalty(F_incons)
    if p["W_cls"].value.shape[1] != z.value.shape[-1]:
        raise ValueError(f"classifier expects dim {p['W_cls'].value.shape[1]}, fused feature has {z.value.shape[-1]}")
    return T.linear(z, p["W_cls"], p["b_cls"])


def classic_features(X: Var, mode: str, p: Mapping[str, Var]) -> Var:
    if mode not in CLASSIC_MODES:
        raise ValueError(f"unknown classic mode {mode!r}; expected one of {CLASSIC_MODES}")
    B, S, d = X.value.shape

    def or_():
        return T.sum_(X, axis=1)

    def and_():
        out = X[:, 0, :]
        for s in range(1, S):
            out = out * X[:, s, :]
        return out

    def diffs():
        return T.reshape(X[:, :1, :] - X[:, 1:, :], (B, (S - 1) * d))

    if mode == "Or":
        return or_()
    if mode == "And":
        return and_()
    joined = diffs() if mode == "Not" else T.concat([or_(), and_(), diffs()], axis=-1)
    return T.relu(T.linear(joined, p["W_rel"], p["b_rel"]))


@dataclass
class ForwardResult:
    logits: Var
    alpha: Var | None = None
    beta: Var | None = None
    gamma: Var | None = None
    F_comp: Var | None = None
    F_incons: Var | None = None


def forward(X, p: Mapping[str, Var], variant: Variant = Variant()) -> ForwardResult:
    """Logits for a batch ``X`` of shape (B, S, d)."""
    if not isinstance(X, Var):
        X = next(iter(p.values())).tape.constant(X)
    if X.value.ndim != 3:
        raise ValueError(f"features must be (batch, slots, dim), got {X.value.shape}")
    if variant.kind == "concat":
        B = X.value.shape[0]
        return ForwardResult(T.linear(T.reshape(X, (B, -1)), p["W_cls"], p["b_cls"]))
    if variant.kind in CLASSIC_MODES:
        return ForwardResult(T.linear(classic_features(X, variant.kind, p), p["W_cls"], p["b_cls"]))

    drop = variant.drop_relation
    n_fine = X.value.shape[1] - 1
    alpha = None
    if drop == "importance":
        weights = X.tape.constant(np.full((X.value.shape[0], n_fine), 1.0 / n_fine))
    else:
        alpha = importance_scores(X, p)
        weights = alpha[:, 1:]
    beta, C = complementarity_terms(X, drop=drop == "complementarity")
    F_comp = fuse(X[:, :1, :], C, weights)
    gamma = F_incons = None
    if drop != "inconsistency":
        gamma, _, F_incons = inconsistency_terms(X)
    logits = classify_logits(F_comp, F_incons, p)
    return ForwardResult(logits, alpha, beta, gamma, F_comp, F_incons)


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray
    relevance: np.ndarray | None = None

    @classmethod
    def from_examples(cls, examples: Sequence[tuple[SemanticBundle, int, RankingTarget | None]]) -> "Batch":
        X = np.stack([b.stack() for b, _, _ in examples])
        y = np.array([lab for _, lab, _ in examples], dtype=np.int64)
        targets = [t for _, _, t in examples]
        rel = None
        if all(t is not None for t in targets):
            slots = examples[0][0].slots
            rel = np.stack([t.relevance_for(slots) for t in targets])
        return cls(X, y, rel)


def loss_on_tape(
    tape: Tape,
    p: Mapping[str, Var],
    batch: Batch,
    variant: Variant = Variant(),
    lam: float = 1.0,
    tau: float = 1.0,
    sinkhorn: SinkhornConfig = SinkhornConfig(),
) -> tuple[Var, dict]:
    """Mean cross-entropy plus ``lam / n_slots`` times the mean negated NeuralNDCG."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    out = forward(tape.constant(batch.X), p, variant)
    cls_loss = T.mean(T.cross_entropy(out.logits, batch.y))
    info = {"cls": float(cls_loss.value), "rank": 0.0}
    loss = cls_loss
    if lam > 0 and out.alpha is not None and batch.relevance is not None:
        ndcg, rinfo = neural_ndcg(out.alpha, batch.relevance, tau, sinkhorn)
        n_slots = batch.relevance.shape[-1]
        rank_loss = T.mean(-ndcg) * (1.0 / n_slots)
        info["rank"] = float(rank_loss.value)
        info["sinkhorn_converged"] = rinfo["sinkhorn_converged"]
        loss = loss + rank_loss * lam
    return loss, info


def srr_loss(
    batch,
    params,
    lam: float = 1.0,
    tau: float = 1.0,
    sinkhorn: SinkhornConfig = SinkhornConfig(),
    variant: Variant = Variant(),
) -> tuple[float, dict[str, np.ndarray]]:
    """Objective value and gradients for every parameter array.

    ``batch`` is a :class:`Batch` or a sequence of
    ``(bundle, label, RankingTarget)`` triples; ``params`` an
    :class:`SrrParams` or a name->array mapping.
    """
    if not isinstance(batch, Batch):
        batch = Batch.from_examples(batch)
    arrays = params.to_dict() if isinstance(params, SrrParams) else dict(params)
    tape = Tape()
    p = {k: tape.var(v) for k, v in arrays.items()}
    loss, _ = loss_on_tape(tape, p, batch, variant, lam, tau, sinkhorn)
    tape.backward(loss)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in p.items()}
    return float(loss.value), grads


# single-sample convenience API


def _const_params(params) -> tuple[Tape, dict[str, Var]]:
    arrays = params.to_dict() if isinstance(params, SrrParams) else dict(params)
    tape = Tape()
    return tape, {k: tape.constant(v) for k, v in arrays.items()}


def importance(bundle: SemanticBundle, params) -> np.ndarray:
    tape, p = _const_params(params)
    return importance_scores(tape.constant(bundle.stack()[None]), p).value[0]


def complementarity(bundle: SemanticBundle) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    beta, C = complementarity_terms(Tape().constant(bundle.stack()[None]))
    names = list(bundle.fine)
    return (
        {m: float(beta.value[0, i]) for i, m in enumerate(names)},
        {m: C.value[0, i].copy() for i, m in enumerate(names)},
    )


def fuse_comp(alpha, bundle: SemanticBundle, C: Mapping[str, np.ndarray]) -> np.ndarray:
    """``alpha`` covers (T, *fine); only the fine entries weight the sum."""
    alpha = np.asarray(alpha, dtype=np.float64)
    names = list(bundle.fine)
    if alpha.shape[0] != len(names) + 1:
        raise ValueError(f"alpha has {alpha.shape[0]} entries for {len(names) + 1} slots")
    tape = Tape()
    Cm = tape.constant(np.stack([C[m] for m in names])[None])
    return fuse(tape.constant(bundle.F_T[None, None]), Cm, tape.constant(alpha[None, 1:])).value[0]


def inconsistency(bundle: SemanticBundle) -> tuple[dict[str, float], dict[str, np.ndarray], np.ndarray]:
    gamma, I, F_incons = inconsistency_terms(Tape().constant(bundle.stack()[None]))
    names = list(bundle.fine)
    return (
        {m: float(gamma.value[0, i]) for i, m in enumerate(names)},
        {m: I.value[0, i].copy() for i, m in enumerate(names)},
        F_incons.value[0],
    )


def classify(F_comp, F_incons, params) -> np.ndarray:
    F_comp = np.asarray(F_comp, dtype=np.float64)
    F_incons = np.asarray(F_incons, dtype=np.float64)
    if F_comp.shape[0] != 2 * F_incons.shape[0]:
        raise ValueError(f"F_Comp dim {F_comp.shape[0]} must be twice F_Incons dim {F_incons.shape[0]}")
    tape, p = _const_params(params)
    return classify_logits(tape.constant(F_comp[None]), tape.constant(F_incons[None]), p).value[0]


def srr_forward(bundle: SemanticBundle, params) -> SrrOutput:
    tape, p = _const_params(params)
    out = forward(tape.constant(bundle.stack()[None]), p)
    names = list(bundle.fine)
    degenerate = [m for m in names if not np.any(bundle.fine[m])]
    if not np.any(bundle.F_T):
        degenerate = [TEXT_SLOT, *names]
    return SrrOutput(
        alpha=out.alpha.value[0],
        beta={m: float(out.beta.value[0, i]) for i, m in enumerate(names)},
        gamma={m: float(out.gamma.value[0, i]) for i, m in enumerate(names)},
        F_Comp=out.F_comp.value[0],
        F_Incons=out.F_incons.value[0],
        logits=out.logits.value[0],
        degenerate=degenerate,
    )


def classic_fuse(bundle: SemanticBundle, mode: str, params) -> np.ndarray:
    if mode not in CLASSIC_MODES:
        raise ValueError(f"unknown classic mode {mode!r}; expected one of {CLASSIC_MODES}")
    tape, p = _const_params(params)
    return forward(tape.constant(bundle.stack()[None]), p, Variant(mode)).logits.value[0]
