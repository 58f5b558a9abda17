import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semrel.core import tape as T
from semrel.core.gradcheck import grad_check
from semrel.core.tape import Tape
from semrel.ranking import (
    RankingTarget,
    SinkhornConfig,
    SoftPermutation,
    discount,
    gain,
    hard_sort_matrix,
    kendall_tau,
    neural_ndcg,
    neural_ndcg_loss,
    sinkhorn,
    soft_permutation,
)

scores_st = st.integers(2, 6).flatmap(lambda n: arrays(np.float64, n, elements=st.floats(-5, 5)))


def brute_ndcg(scores, relevance):
    """NDCG of the ordering induced by ``scores``; ideal DCG by trying every ordering."""
    n = len(scores)
    disc = [1.0 / np.log2(j + 2.0) for j in range(n)]
    dcg = lambda order: sum((2.0 ** relevance[i] - 1.0) * disc[j] for j, i in enumerate(order))  # noqa: E731
    best = max(dcg(p) for p in itertools.permutations(range(n)))
    induced = sorted(range(n), key=lambda i: -scores[i])
    return dcg(induced) / best


def sinkhorn_oracle(P, iters=10_000):
    P = np.array(P, dtype=np.float64)
    for _ in range(iters):
        P = P / P.sum(axis=0, keepdims=True)
        P = P / P.sum(axis=1, keepdims=True)
    return P


def with_min_gap(n, gap, rng):
    base = np.cumsum(rng.uniform(gap, gap + 1.0, size=n))
    return rng.permutation(base) - base.mean()


class TestGainDiscount:
    @pytest.mark.parametrize("s,expected", [(0, 0.0), (1, 1.0), (2, 3.0), (3, 7.0)])
    def test_gain(self, s, expected):
        assert gain(s) == expected

    @pytest.mark.parametrize("j,expected", [(1, 1.0), (3, 0.5), (7, 1 / 3)])
    def test_discount(self, j, expected):
        assert discount(j) == pytest.approx(expected, abs=1e-15)

    def test_discount_rejects_rank_zero(self):
        with pytest.raises(ValueError):
            discount(0)


class TestRankingTarget:
    def test_relevance_counts_down(self):
        t = RankingTarget(("T", "I", "A", "E"))
        np.testing.assert_array_equal(t.relevance, [3, 2, 1, 0])
        np.testing.assert_array_equal(t.relevance_for(["T", "A", "E", "I"]), [3, 1, 0, 2])

    def test_text_slot_must_be_first(self):
        with pytest.raises(ValueError):
            RankingTarget(("A", "T", "E", "I"))

    def test_not_a_permutation(self):
        with pytest.raises(ValueError):
            RankingTarget(("T", "A", "A"))

    def test_with_text_first(self):
        assert RankingTarget.with_text_first(["E", "A"]).order == ("T", "E", "A")


class TestSoftPermutation:
    def test_two_sorted_scores_give_identity(self):
        np.testing.assert_allclose(soft_permutation([2.0, 1.0], 1e-3).P, np.eye(2), atol=1e-6)

    def test_two_unsorted_scores_give_swap(self):
        np.testing.assert_allclose(soft_permutation([1.0, 3.0], 1e-3).P, [[0, 1], [1, 0]], atol=1e-6)

    def test_all_equal_scores_give_uniform_rows(self):
        np.testing.assert_allclose(soft_permutation(np.full(4, 0.7), 0.5).P, np.full((4, 4), 0.25), atol=1e-15)

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            soft_permutation([1.0, 2.0], 0.0)

    def test_nonfinite_scores_rejected(self):
        with pytest.raises(ValueError):
            soft_permutation([1.0, np.nan], 1.0)

    @given(scores_st, st.floats(0.01, 10))
    def test_rows_are_distributions(self, s, tau):
        P = soft_permutation(s, tau).P
        assert np.all((P >= 0) & (P <= 1))
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)

    @given(scores_st, st.floats(-100, 100))
    def test_shift_invariant(self, s, c):
        np.testing.assert_allclose(soft_permutation(s + c, 0.7).P, soft_permutation(s, 0.7).P, atol=1e-12)

    @given(st.integers(2, 6), st.integers(0, 2**31))
    def test_distance_to_hard_sort_shrinks_with_tau(self, n, seed):
        s = with_min_gap(n, 0.05, np.random.default_rng(seed))
        H = hard_sort_matrix(s)
        dist = [np.abs(soft_permutation(s, tau).P - H).max() for tau in (1.0, 0.1, 1e-3)]
        assert dist[0] >= dist[1] - 1e-12 >= dist[2] - 2e-12

    def test_hard_limit_with_gap(self):
        rng = np.random.default_rng(0)
        for n in range(2, 6):
            for _ in range(20):
                s = with_min_gap(n, 0.5, rng)
                np.testing.assert_allclose(soft_permutation(s, 1e-3).P, hard_sort_matrix(s), atol=1e-3)


class TestSinkhorn:
    def test_uniform_is_fixed_point(self):
        P = np.full((3, 3), 1 / 3)
        out = sinkhorn(SoftPermutation(P, 1.0))
        np.testing.assert_allclose(out.P, P, atol=1e-12)
        assert out.sinkhorn_applied and out.converged

    def test_two_by_two_against_oracle_loop(self):
        P = [[0.9, 0.1], [0.9, 0.1]]
        out = sinkhorn(SoftPermutation(np.array(P), 1.0), max_iters=100, tol=1e-10)
        np.testing.assert_allclose(out.P.sum(axis=0), 1.0, atol=1e-10)
        np.testing.assert_allclose(out.P, sinkhorn_oracle(P), atol=1e-9)

    def test_rejects_nonpositive_entries(self):
        with pytest.raises(ValueError):
            sinkhorn(SoftPermutation(np.eye(2), 1.0))

    def test_nonconvergence_is_flagged(self):
        rng = np.random.default_rng(3)
        out = sinkhorn(soft_permutation(rng.normal(size=6), 0.05), max_iters=1, tol=1e-14)
        assert not out.converged and out.n_iters == 1

    @given(st.integers(2, 8), st.integers(0, 2**31), st.floats(0.05, 3))
    def test_converged_output_is_balanced(self, n, seed, tau):
        s = np.random.default_rng(seed).normal(size=n)
        out = sinkhorn(soft_permutation(s, tau), max_iters=500, tol=1e-6)
        if out.converged:
            np.testing.assert_allclose(out.P.sum(axis=0), 1.0, atol=1e-6)
        # the final half-step normalises rows, so they always sum to 1
        np.testing.assert_allclose(out.P.sum(axis=1), 1.0, atol=1e-9)

    @given(st.integers(2, 8), st.integers(0, 2**31), st.floats(0.5, 3))
    def test_converges_at_moderate_tau(self, n, seed, tau):
        s = np.random.default_rng(seed).normal(size=n)
        assert sinkhorn(soft_permutation(s, tau), max_iters=5000, tol=1e-6).converged


class TestNeuralNDCG:
    def test_ordered_scores_give_minus_one(self):
        target = RankingTarget(("T", "A", "E", "I"))
        assert neural_ndcg_loss([4.0, 3.0, 2.0, 1.0], target, tau=1e-3) == pytest.approx(-1.0, abs=1e-3)

    def test_every_ordering_matches_bruteforce_ndcg(self):
        for n in range(2, 6):
            rel = np.arange(n - 1, -1, -1, dtype=float)
            for perm in itertools.permutations(range(n)):
                s = np.array(perm, dtype=float)
                got = -neural_ndcg_loss(s, rel, tau=1e-3)
                assert got == pytest.approx(brute_ndcg(s, rel), abs=1e-3)

    def test_degenerate_target_is_constant_with_zero_gradient(self):
        tape = Tape()
        s = tape.var(np.array([0.3, -1.0, 2.0]))
        ndcg, info = neural_ndcg(s, np.ones(3), tau=1.0)
        tape.backward(T.sum_(ndcg))
        assert info["degenerate"].item() is True
        assert float(ndcg.value) == 1.0
        np.testing.assert_allclose(s.grad, 0.0, atol=1e-9)

    def test_wrong_length_target(self):
        with pytest.raises(ValueError):
            neural_ndcg_loss([1.0, 2.0], RankingTarget(("T", "A", "E")))

    @given(st.integers(2, 6), st.integers(0, 2**31), st.floats(0.05, 3))
    def test_value_range(self, n, seed, tau):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=n)
        rel = rng.permutation(n).astype(float)
        loss = neural_ndcg_loss(s, rel, tau, SinkhornConfig(max_iters=500, tol=1e-9))
        assert -1.0 - 1e-6 <= loss <= 0.0

    @pytest.mark.parametrize("tau", [1.0, 0.3])
    @pytest.mark.parametrize("use_sinkhorn", [True, False])
    def test_gradient(self, tau, use_sinkhorn, rng):
        cfg = SinkhornConfig(enabled=use_sinkhorn)
        rel = np.array([3.0, 1.0, 0.0, 2.0])
        for _ in range(5):
            s0 = with_min_gap(4, 0.1, rng)
            err = grad_check(lambda s: -neural_ndcg(s, rel, tau, cfg)[0], s0, eps=1e-6)
            assert err < 1e-6

    def test_batched_matches_single(self, rng):
        S = rng.normal(size=(3, 4))
        R = np.array([[3, 2, 1, 0], [0, 1, 2, 3], [3, 0, 2, 1]], dtype=float)
        batched, _ = neural_ndcg(Tape().constant(S), R, 0.5)
        single = [-neural_ndcg_loss(s, r, 0.5) for s, r in zip(S, R)]
        np.testing.assert_allclose(batched.value, single, atol=1e-12)

    def test_tape_input_returns_tape_output(self):
        tape = Tape()
        out = neural_ndcg_loss(tape.var(np.array([1.0, 0.0])), RankingTarget(("A", "E")))
        assert hasattr(out, "tape")


class TestKendallTau:
    def test_identical_and_reversed(self):
        assert kendall_tau("ABCD", "ABCD") == 1.0
        assert kendall_tau("ABCD", "DCBA") == -1.0

    def test_one_swap(self):
        assert kendall_tau("ABC", "BAC") == pytest.approx(1 / 3)

    def test_mismatched_items(self):
        with pytest.raises(ValueError):
            kendall_tau("AB", "AC")
