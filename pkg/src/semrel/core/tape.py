"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every elementary operation in execution order. Each
recorded node keeps its forward value and a closure mapping the output
gradient to input gradients. :meth:`Tape.backward` replays the record in
reverse, accumulating gradients into every node that requires them.

Operations accept leading batch dimensions and follow numpy broadcasting;
gradients are summed back to each input's shape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_LN2 = float(np.log(2.0))


class Var:
    """A node on a tape: a float64 value plus its accumulated gradient."""

    __slots__ = ("value", "grad", "tape", "parents", "vjp", "requires_grad")

    def __init__(self, value, tape: "Tape", parents=(), vjp=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of operations; single-threaded by design."""

    def __init__(self):
        self.nodes: list[Var] = []

    def var(self, value) -> Var:
        """Leaf that receives a gradient."""
        return Var(np.array(value, dtype=np.float64), self, requires_grad=True)

    def constant(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self)

    def record(self, value, parents: Sequence[Var], vjp: Callable) -> Var:
        requires = any(p.requires_grad for p in parents)
        out = Var(value, self, tuple(parents), vjp, requires)
        if requires:
            self.nodes.append(out)
        return out

    def backward(self, root: Var) -> None:
        """Accumulate d(root)/d(node) into ``.grad`` of every reachable node."""
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(g, parent.value.shape)
                parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _tape_of(*xs) -> Tape:
    tapes = {id(x.tape): x.tape for x in xs if isinstance(x, Var)}
    if not tapes:
        raise TypeError("at least one operand must be a Var")
    if len(tapes) > 1:
        raise ValueError("operands live on different tapes")
    return next(iter(tapes.values()))


def _lift(x, tape: Tape) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def _binary(a, b):
    tape = _tape_of(a, b)
    return tape, _lift(a, tape), _lift(b, tape)


# elementwise arithmetic


def add(a, b) -> Var:
    tape, a, b = _binary(a, b)
    return tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    tape, a, b = _binary(a, b)
    return tape.record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Var:
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Var:
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return tape.record(out, (a, b), lambda g: (g / bv, -g * out / bv))


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    av = a.value
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


def abs_(a: Var) -> Var:
    sign = np.sign(a.value)
    return a.tape.record(np.abs(a.value), (a,), lambda g: (g * sign,))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp2m1(a: Var) -> Var:
    """2**a - 1, the graded-relevance gain."""
    pw = np.exp2(a.value)
    return a.tape.record(pw - 1.0, (a,), lambda g: (g * pw * _LN2,))


def square(a: Var) -> Var:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * g * av,))


# reductions and shape


def sum_(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.value.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return a.tape.record(np.asarray(out), (a,), vjp)


def mean(a: Var, axis=None, keepdims=False) -> Var:
    n = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a: Var, shape) -> Var:
    orig = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def take(a: Var, index) -> Var:
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return a.tape.record(np.asarray(a.value[index]), (a,), vjp)


def concat(parts: Sequence, axis: int = -1) -> Var:
    tape = _tape_of(*parts)
    parts = [_lift(p, tape) for p in parts]
    values = [p.value for p in parts]
    out = np.concatenate(values, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]
    return tape.record(out, parts, lambda g: tuple(np.split(g, splits, axis=axis)))


def broadcast_to(a: Var, shape) -> Var:
    return a.tape.record(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (g,))


# linear algebra


def matmul(a, b) -> Var:
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return tape.record(av @ bv, (a, b), vjp)


def linear(x, W, b) -> Var:
    """x @ W.T + b over the last axis of x; W is (out, in)."""
    tape = _tape_of(x, W, b)
    x, W, b = _lift(x, tape), _lift(W, tape), _lift(b, tape)
    if W.value.shape[-1] != x.value.shape[-1]:
        raise ValueError(
            f"linear: input dim {x.value.shape[-1]} does not match weight cols {W.value.shape[-1]}"
        )
    if b.value.shape[-1] != W.value.shape[0]:
        raise ValueError(f"linear: bias dim {b.value.shape[-1]} does not match weight rows {W.value.shape[0]}")
    xv, Wv = x.value, W.value

    def vjp(g):
        gx = g @ Wv
        gW = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        return gx, gW, g

    return tape.record(xv @ Wv.T + b.value, (x, W, b), vjp)


# normalisations


def softmax(a: Var, axis: int = -1) -> Var:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return a.tape.record(s, (a,), vjp)


def logsumexp(a: Var, axis: int = -1, keepdims: bool = False) -> Var:
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    se = e.sum(axis=axis, keepdims=True)
    out = np.log(se) + m
    weights = e / se

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return a.tape.record(out if keepdims else np.squeeze(out, axis=axis), (a,), vjp)


def log_softmax(a: Var, axis: int = -1) -> Var:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return a.tape.record(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def sinkhorn_log(logP: Var, max_iters: int, tol: float) -> tuple[Var, bool, int]:
    """Log-space Sinkhorn balancing over the last two axes as one tape node.

    Each sweep normalises columns then rows. Stops once every row and
    column sum is within ``tol`` of 1, or after ``max_iters`` sweeps.
    Returns ``(balanced, converged, sweeps)``.
    """
    x = logP.value
    halves = []

    def err(v):
        P = np.exp(v)
        return max(np.abs(P.sum(axis=-1) - 1.0).max(), np.abs(P.sum(axis=-2) - 1.0).max())

    converged = err(x) <= tol
    sweeps = 0
    while not converged and sweeps < max_iters:
        for axis in (-2, -1):
            m = x.max(axis=axis, keepdims=True)
            x = x - (np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m)
            halves.append((axis, x))
        sweeps += 1
        converged = err(x) <= tol

    def vjp(g):
        # y = x - lse(x) along axis  =>  dx = dy - exp(y) * sum(dy, axis)
        for axis, y in reversed(halves):
            g = g - np.exp(y) * g.sum(axis=axis, keepdims=True)
        return (g,)

    return logP.tape.record(x, (logP,), vjp), bool(converged), sweeps


# fused losses and similarities


def cross_entropy(logits: Var, labels) -> Var:
    """Per-sample -log softmax(logits)[label] over the last axis."""
    labels = np.asarray(labels, dtype=np.int64)
    K = logits.value.shape[-1]
    if labels.shape != logits.value.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits batch {logits.value.shape[:-1]}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range for {K} classes")
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1.0, -1)
        return (g[..., None] * grad,)

    return logits.tape.record(-picked, (logits,), vjp)


def cosine(a, b, axis: int = -1) -> Var:
    """Cosine similarity along ``axis``; zero-norm pairs yield 0 with zero gradient."""
    tape, a, b = _binary(a, b)
    av, bv = np.broadcast_arrays(a.value, b.value)
    na = np.sqrt((av * av).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bv * bv).sum(axis=axis, keepdims=True))
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    raw = np.where(ok, (av * bv).sum(axis=axis, keepdims=True) / (na_s * nb_s), 0.0)
    c = np.clip(raw, -1.0, 1.0)

    def vjp(g):
        g = np.expand_dims(g, axis) * ok
        ga = g * (bv / (na_s * nb_s) - raw * av / (na_s * na_s))
        gb = g * (av / (na_s * nb_s) - raw * bv / (nb_s * nb_s))
        return ga, gb

    return tape.record(np.squeeze(c, axis=axis), (a, b), vjp)


def mse(a, b, axis: int = -1) -> Var:
    tape, a, b = _binary(a, b)
    if a.value.shape[axis] != b.value.shape[axis]:
        raise ValueError(f"mse: dims {a.value.shape[axis]} and {b.value.shape[axis]} differ")
    diff = a.value - b.value
    d = diff.shape[axis]

    def vjp(g):
        gd = np.expand_dims(g, axis) * (2.0 / d) * diff
        return gd, -gd

    return tape.record((diff * diff).mean(axis=axis), (a, b), vjp)
