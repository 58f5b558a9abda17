import warnings

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semrel.core import ops
from semrel.core import tape as T
from semrel.core.gradcheck import grad_check, numeric_grad, tape_grad
from semrel.core.ops import DegenerateFeatureWarning
from semrel.core.tape import Tape

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def vecs(n_min=1, n_max=8):
    return st.integers(n_min, n_max).flatmap(lambda n: arrays(np.float64, n, elements=finite))


class TestTapeBasics:
    def test_backward_accumulates_through_shared_node(self):
        tape = Tape()
        x = tape.var(np.array([2.0, -3.0]))
        y = x * x + x * 3.0
        tape.backward(T.sum_(y))
        np.testing.assert_allclose(x.grad, 2 * x.value + 3.0)

    def test_constants_get_no_gradient(self):
        tape = Tape()
        x = tape.var(np.ones(3))
        c = tape.constant(np.arange(3.0))
        tape.backward(T.sum_(x * c))
        assert c.grad is None
        np.testing.assert_allclose(x.grad, np.arange(3.0))

    def test_backward_needs_scalar(self):
        tape = Tape()
        x = tape.var(np.ones(3))
        with pytest.raises(ValueError):
            tape.backward(x * 2.0)

    def test_unbroadcast_bias(self):
        tape = Tape()
        x = tape.var(np.ones((4, 3)))
        b = tape.var(np.zeros(3))
        tape.backward(T.sum_(x + b))
        np.testing.assert_allclose(b.grad, np.full(3, 4.0))

    def test_mixing_tapes_raises(self):
        with pytest.raises(ValueError):
            Tape().var(np.ones(2)) + Tape().var(np.ones(2))


class TestOpGradients:
    @pytest.mark.parametrize(
        "f",
        [
            lambda x: T.sum_(x * x * x),
            lambda x: T.sum_(T.exp(x) / (x * x + 1.0)),
            lambda x: T.sum_(T.log(x * x + 1.0)),
            lambda x: T.sum_(T.abs_(x)),
            lambda x: T.sum_(T.relu(x) * x),
            lambda x: T.sum_(T.exp2m1(x)),
            lambda x: T.sum_(T.square(x - 0.5)),
            lambda x: T.mean(T.reshape(x, (2, 3)) * np.arange(6.0).reshape(2, 3)),
            lambda x: T.sum_(T.softmax(T.reshape(x, (2, 3)), axis=-1) * np.arange(6.0).reshape(2, 3)),
            lambda x: T.sum_(T.logsumexp(T.reshape(x, (3, 2)), axis=0)),
            lambda x: T.sum_(T.log_softmax(x) * np.linspace(-1, 1, 6)),
            lambda x: T.sum_(T.concat([x, x * 2.0], axis=-1) * np.arange(12.0)),
            lambda x: T.sum_(x[1:4] * x[0:3]),
            lambda x: T.sum_(T.broadcast_to(T.reshape(x, (1, 6)), (3, 6)) * np.arange(18.0).reshape(3, 6)),
            lambda x: T.sum_(T.matmul(T.reshape(x, (2, 3)), T.reshape(x, (3, 2)))),
            lambda x: T.sum_(T.cosine(T.reshape(x, (2, 3)), np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]]))),
            lambda x: T.sum_(T.mse(T.reshape(x, (2, 3)), np.ones((2, 3)))),
            lambda x: T.sum_(T.cross_entropy(T.reshape(x, (2, 3)), np.array([2, 0]))),
        ],
    )
    def test_matches_central_differences(self, f, rng):
        x = rng.uniform(0.2, 1.5, size=6) * rng.choice([-1.0, 1.0], size=6)
        assert grad_check(f, x) < 1e-6

    def test_linear_gradient_all_inputs(self, rng):
        W0, b0, x0 = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(5, 4))
        f_W = lambda W: T.sum_(T.square(T.linear(x0, W, b0)))  # noqa: E731
        f_x = lambda x: T.sum_(T.square(T.linear(x, W0, b0)))  # noqa: E731
        f_b = lambda b: T.sum_(T.square(T.linear(x0, W0, b)))  # noqa: E731
        assert grad_check(f_W, W0) < 1e-6
        assert grad_check(f_x, x0) < 1e-6
        assert grad_check(f_b, b0) < 1e-6

    def test_numeric_grad_of_quadratic(self):
        g = numeric_grad(lambda x: T.sum_(x * x), np.array([1.0, -2.0]))
        np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)

    def test_tape_grad_returns_value(self):
        val, g = tape_grad(lambda x: T.sum_(x * 3.0), np.ones(2))
        assert val == 6.0
        np.testing.assert_allclose(g, [3.0, 3.0])


class TestLinear:
    def test_dim_mismatch_names_both_dims(self):
        with pytest.raises(ValueError, match="3.*4|4.*3"):
            ops.linear(np.ones(3), np.ones((2, 4)), np.zeros(2))

    def test_bias_mismatch(self):
        with pytest.raises(ValueError):
            ops.linear(np.ones(4), np.ones((2, 4)), np.zeros(3))

    def test_value(self):
        W = np.array([[1.0, 2.0], [0.0, -1.0]])
        np.testing.assert_allclose(ops.linear([1.0, 1.0], W, [0.5, 0.5]), [3.5, -0.5])

    def test_tape_and_value_agree(self, rng):
        x, W, b = rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3)
        tape = Tape()
        np.testing.assert_allclose(T.linear(tape.constant(x), W, b).value, ops.linear(x, W, b))


class TestSoftmax:
    @given(vecs())
    def test_is_a_distribution(self, x):
        p = ops.softmax(x)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(), 1.0, rtol=1e-12)

    @given(vecs(), finite)
    def test_shift_invariant(self, x, c):
        np.testing.assert_allclose(ops.softmax(x), ops.softmax(x + c), atol=1e-12)

    def test_large_inputs_are_stable(self):
        p = ops.softmax([1000.0, 1000.0, -1000.0])
        np.testing.assert_allclose(p, [0.5, 0.5, 0.0])

    def test_log_softmax_consistent(self, rng):
        x = rng.normal(size=5)
        np.testing.assert_allclose(np.exp(ops.log_softmax(x)), ops.softmax(x))


class TestCosine:
    @given(vecs(2, 8), st.floats(0.01, 100), st.floats(0.01, 100))
    def test_positive_scale_invariant(self, a, s1, s2):
        b = np.roll(a, 1) + 0.5
        assume(np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3)
        np.testing.assert_allclose(ops.cosine(s1 * a, s2 * b), ops.cosine(a, b), atol=1e-9)

    @given(vecs(1, 8))
    def test_bounded(self, a):
        assume(np.linalg.norm(a) > 0)
        b = a[::-1].copy() + 1.0
        assume(np.linalg.norm(b) > 0)
        assert -1.0 <= ops.cosine(a, b) <= 1.0

    def test_parallel_and_opposite(self):
        assert ops.cosine([1.0, 2.0], [2.0, 4.0]) == pytest.approx(1.0)
        assert ops.cosine([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(-1.0)

    def test_zero_vector_warns_and_returns_zero(self):
        with pytest.warns(DegenerateFeatureWarning):
            assert ops.cosine(np.zeros(3), np.ones(3)) == 0.0

    def test_zero_vector_flag(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert ops.cosine(np.zeros(3), np.ones(3), return_flag=True) == (0.0, True)

    def test_zero_vector_has_zero_gradient_on_tape(self):
        tape = Tape()
        a = tape.var(np.zeros(3))
        b = tape.var(np.array([1.0, 2.0, 3.0]))
        out = T.cosine(a, b)
        tape.backward(T.sum_(out))
        assert out.value == 0.0
        np.testing.assert_array_equal(a.grad, 0.0)
        np.testing.assert_array_equal(b.grad, 0.0)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            ops.cosine(np.ones(2), np.ones(3))


class TestMeanPool:
    @given(st.integers(1, 6).flatmap(lambda n: arrays(np.float64, (n, 3), elements=finite)))
    def test_inside_coordinate_hull(self, toks):
        pooled = ops.mean_pool(list(toks))
        assert np.all(pooled >= toks.min(axis=0) - 1e-12)
        assert np.all(pooled <= toks.max(axis=0) + 1e-12)

    def test_single_token_is_identity(self):
        np.testing.assert_array_equal(ops.mean_pool([np.array([1.0, 2.0])]), [1.0, 2.0])

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            ops.mean_pool([])


class TestLosses:
    def test_mse_value(self):
        assert ops.mse([1.0, 2.0], [1.0, 4.0]) == 2.0

    def test_mse_zero_iff_equal(self, rng):
        a = rng.normal(size=4)
        assert ops.mse(a, a) == 0.0

    def test_cross_entropy_uniform_logits(self):
        assert ops.cross_entropy(np.zeros(4), 2) == pytest.approx(np.log(4))

    def test_cross_entropy_label_range(self):
        with pytest.raises(ValueError):
            ops.cross_entropy(np.zeros(3), 3)
        with pytest.raises(ValueError):
            T.cross_entropy(Tape().constant(np.zeros((1, 3))), np.array([-1]))

    def test_tape_cross_entropy_matches_value_version(self, rng):
        logits = rng.normal(size=(3, 4))
        labels = np.array([0, 3, 1])
        per = T.cross_entropy(Tape().constant(logits), labels).value
        np.testing.assert_allclose(per, [ops.cross_entropy(l, y) for l, y in zip(logits, labels)])


class TestSpecExamples:
    def test_linear_identity_and_arithmetic(self):
        np.testing.assert_array_equal(ops.linear([1.0, 2.0], np.eye(2), [0.0, 0.0]), [1.0, 2.0])
        np.testing.assert_array_equal(ops.linear([1.0, 1.0], [[2.0, 3.0]], [-5.0]), [0.0])

    def test_linear_against_dot_product_loop(self, rng):
        x, W, b = np.array([0.3, -0.7]), rng.normal(size=(2, 2)), rng.normal(size=2)
        expected = [sum(W[i][j] * x[j] for j in range(2)) + b[i] for i in range(2)]
        np.testing.assert_allclose(ops.linear(x, W, b), expected, rtol=1e-15)

    @pytest.mark.parametrize("x,expected", [([-1.0, 0.0, 2.0], [0.0, 0.0, 2.0]), ([0.0, 0.0], [0.0, 0.0]), ([5.5], [5.5])])
    def test_relu(self, x, expected):
        np.testing.assert_array_equal(ops.relu(x), expected)

    def test_softmax_against_high_precision(self):
        import mpmath

        mpmath.mp.dps = 50
        e = [mpmath.exp(v) for v in (1, 2, 3)]
        expected = [float(v / sum(e)) for v in e]
        np.testing.assert_allclose(ops.softmax([1.0, 2.0, 3.0]), expected, rtol=1e-15)
        np.testing.assert_allclose(ops.softmax(np.zeros(4)), np.full(4, 0.25))

    @given(vecs(2, 8), st.randoms(use_true_random=False))
    def test_softmax_permutation_equivariant(self, x, r):
        perm = list(range(len(x)))
        r.shuffle(perm)
        np.testing.assert_allclose(ops.softmax(x[perm]), ops.softmax(x)[perm], atol=1e-15)

    def test_mean_pool_examples(self, rng):
        v = rng.normal(size=4)
        np.testing.assert_allclose(ops.mean_pool([v, v, v]), v)
        np.testing.assert_array_equal(ops.mean_pool([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5])
        toks = rng.normal(size=(7, 4))
        total = np.zeros(4)
        for t in toks:
            total = total + t
        np.testing.assert_allclose(ops.mean_pool(list(toks)), total / 7, rtol=1e-14)

    def test_mse_examples(self, rng):
        assert ops.mse([1.0, 1.0], [0.0, 0.0]) == 1.0
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert ops.mse(a, b) == pytest.approx(sum((a[i] - b[i]) ** 2 for i in range(8)) / 8, rel=1e-14)

    def test_cross_entropy_examples(self):
        import mpmath

        mpmath.mp.dps = 50
        assert ops.cross_entropy([10.0, -10.0], 0) == pytest.approx(0.0, abs=1e-8)
        lse = mpmath.log(sum(mpmath.exp(v) for v in (1, 2, 3)))
        assert ops.cross_entropy([1.0, 2.0, 3.0], 1) == pytest.approx(float(lse - 2), rel=1e-14)

    def test_cosine_orthogonal(self):
        assert ops.cosine([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_grad_check_examples(self, rng):
        assert grad_check(lambda x: T.sum_(x), rng.normal(size=5)) < 1e-9
        _, g = tape_grad(lambda x: T.sum_(x * x), np.array([1.0, 2.0]))
        np.testing.assert_allclose(g, [2.0, 4.0])
        W, b, y = rng.normal(size=(3, 4)), rng.normal(size=3), np.array([1])
        f = lambda x: T.sum_(T.cross_entropy(T.reshape(T.linear(x, W, b), (1, 3)), y))  # noqa: E731
        assert grad_check(f, rng.normal(size=4), eps=1e-5) <= 1e-4


UNARY_OPS = {
    "exp": lambda x, c: T.sum_(T.exp(x) * c),
    "log": lambda x, c: T.sum_(T.log(x * x + 0.5) * c),
    "relu": lambda x, c: T.sum_(T.relu(x) * c),
    "softmax": lambda x, c: T.sum_(T.softmax(x) * c),
    "log_softmax": lambda x, c: T.sum_(T.log_softmax(x) * c),
    "cosine": lambda x, c: T.cosine(x, c),
    "mse": lambda x, c: T.mse(x, c),
    "linear": lambda x, c: T.sum_(T.linear(x, np.outer(c, c[::-1]), c) * c),
    "cross_entropy": lambda x, c: T.sum_(T.cross_entropy(T.reshape(x, (1, -1)), np.array([int(abs(c[0]) * 100) % len(c)]))),
}


class TestGradientSweep:
    @pytest.mark.parametrize("name", sorted(UNARY_OPS))
    def test_fifty_random_configurations(self, name):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        f = UNARY_OPS[name]
        worst = 0.0
        for _ in range(50):
            n = int(rng.integers(1, 17))
            x = rng.normal(size=n)
            x = np.where(np.abs(x) < 1e-3, 1e-3, x)  # keep off the relu kink
            c = rng.normal(size=n)
            worst = max(worst, grad_check(lambda v: f(v, c), x))
        assert worst <= 1e-4
