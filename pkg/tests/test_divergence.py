import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdro.divergence import (
    DivergencePenalty,
    InvalidInputError,
    bregman,
    is_simplex,
    penalty_value,
    project_simplex,
    regularized_argmax,
    regularized_objective,
    to_simplex,
    tv_squared_bound_check,
    worst_case_weights,
)
from gdro.oracles import numeric_dual_argmax, sort_projection

KL2, CHI2 = DivergencePenalty("kl", 2), DivergencePenalty("chi2", 2)


def simplex_grid_2(step=1e-5):
    a = np.arange(0.0, 1.0 + step / 2, step)
    return np.column_stack([a, 1 - a])


def simplex_grid_3(step=2e-3):
    a = np.arange(0.0, 1.0 + step / 2, step)
    A, B = np.meshgrid(a, a)
    keep = A + B <= 1 + 1e-12
    return np.column_stack([A[keep], B[keep], np.maximum(1 - A[keep] - B[keep], 0.0)])


def grid_argmax(fn, grid):
    vals = np.array([fn(g) for g in grid])
    return grid[int(np.argmax(vals))]


def penalty_by_definition(kind, lam):
    # sum_i u_i f(lam_i / u_i) with u uniform
    K = len(lam)
    u = 1.0 / K
    f = (lambda r: r * math.log(r) if r > 0 else 0.0) if kind == "kl" else (lambda r: (r - 1) ** 2)
    return sum(u * f(l / u) for l in lam)


def bregman_by_definition(p, a, b, h=1e-6):
    # phi(a) - phi(b) - <grad phi(b), a - b> with a numerical gradient
    phi = lambda v: penalty_by_definition(p.kind, v)
    b = np.asarray(b, dtype=float)
    grad = np.array([(phi(b + h * e) - phi(b - h * e)) / (2 * h) for e in np.eye(len(b))])
    return phi(a) - phi(b) - grad @ (np.asarray(a) - b)


class TestPenaltyValue:
    def test_zero_at_uniform(self):
        for kind in ("kl", "chi2", "none"):
            assert penalty_value(DivergencePenalty(kind, 4), np.full(4, 0.25)) == pytest.approx(0.0, abs=1e-15)

    def test_chi2_vertex(self):
        assert penalty_value(CHI2, [1.0, 0.0]) == pytest.approx(1.0)
        assert penalty_value(CHI2, [1.0, 0.0]) == pytest.approx(penalty_by_definition("chi2", [1.0, 0.0]))

    def test_kl_vertex(self):
        assert penalty_value(KL2, [1.0, 0.0]) == pytest.approx(math.log(2))
        # the 0 log 0 limit
        assert penalty_value(KL2, [1 - 1e-15, 1e-15]) == pytest.approx(math.log(2), abs=1e-12)

    def test_none_is_zero(self):
        assert penalty_value(DivergencePenalty("none", 3), [1.0, 0.0, 0.0]) == 0.0

    @given(st.integers(2, 10), st.integers(0, 10_000))
    def test_nonnegative(self, K, seed):
        lam = np.random.default_rng(seed).dirichlet(np.full(K, 0.5))
        for kind in ("kl", "chi2"):
            v = penalty_value(DivergencePenalty(kind, K), lam)
            assert v >= -1e-15
            assert v == pytest.approx(penalty_by_definition(kind, lam), rel=1e-9, abs=1e-12)


class TestBregman:
    def test_self_is_zero(self):
        a = np.array([0.2, 0.3, 0.5])
        for kind in ("kl", "chi2", "none"):
            assert bregman(DivergencePenalty(kind, 3), a, a) == 0.0

    def test_kl_against_uniform_matches_penalty(self):
        assert bregman(KL2, [1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
        assert bregman(KL2, [1.0, 0.0], [0.5, 0.5]) == pytest.approx(penalty_value(KL2, [1.0, 0.0]))

    def test_chi2_example(self):
        a, b = [0.75, 0.25], [0.25, 0.75]
        assert bregman(CHI2, a, b) == pytest.approx(1.0)
        assert bregman(CHI2, a, b) == pytest.approx(bregman_by_definition(CHI2, a, b), rel=1e-6)

    def test_kl_matches_definition(self):
        p = DivergencePenalty("kl", 3)
        a, b = np.array([0.1, 0.6, 0.3]), np.array([0.3, 0.3, 0.4])
        assert bregman(p, a, b) == pytest.approx(bregman_by_definition(p, a, b), rel=1e-6)

    def test_kl_infinite_outside_support(self):
        assert bregman(KL2, [0.5, 0.5], [1.0, 0.0]) == math.inf

    def test_none_uses_kl_base(self):
        p = DivergencePenalty("none", 2)
        assert bregman(p, [1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))


class TestSimplexHelpers:
    def test_to_simplex_clamps(self):
        v = to_simplex([0.5, -0.2, 1.5])
        assert is_simplex(v) and v[1] == 0.0

    def test_to_simplex_rejects_empty_mass(self):
        with pytest.raises(InvalidInputError):
            to_simplex([-1.0, 0.0])

    @given(st.integers(1, 16), st.integers(0, 10_000), st.sampled_from([1e-3, 1.0, 1e3]))
    def test_bisection_matches_sorting(self, K, seed, scale):
        v = np.random.default_rng(seed).standard_normal(K) * scale
        out = project_simplex(v)
        assert is_simplex(out)
        np.testing.assert_allclose(out, sort_projection(v), atol=1e-12 * max(1.0, scale))


class TestRegularizedArgmax:
    def test_equal_scores_return_anchor(self):
        anchor = np.array([0.2, 0.5, 0.3])
        for kind in ("kl", "chi2", "none"):
            out = regularized_argmax(DivergencePenalty(kind, 3), np.full(3, 4.0), 1.0, 0.0, 0.7, anchor)
            np.testing.assert_allclose(out, anchor, atol=1e-12)

    def test_zero_step_returns_anchor(self):
        anchor = np.array([0.9, 0.1])
        out = regularized_argmax(KL2, [5.0, 0.0], 0.0, 1.0, 1.0, anchor)
        np.testing.assert_array_equal(out, anchor)

    def test_non_finite_scores(self):
        with pytest.raises(InvalidInputError):
            regularized_argmax(KL2, [np.nan, 0.0], 1.0, 0.0, 1.0, [0.5, 0.5])
        with pytest.raises(InvalidInputError):
            regularized_argmax(CHI2, [np.inf, 0.0], 1.0, 0.0, 1.0, [0.5, 0.5])

    def test_kl_multiplicative_weights_example(self):
        out = regularized_argmax(KL2, [1.0, 0.0], 1.0, 0.0, 1.0, [0.5, 0.5])
        e = math.e
        np.testing.assert_allclose(out, [e / (1 + e), 1 / (1 + e)], atol=1e-15)
        fn = lambda l: regularized_objective(KL2, l, [1.0, 0.0], 1.0, 0.0, 1.0, [0.5, 0.5])
        np.testing.assert_allclose(out, grid_argmax(fn, simplex_grid_2()), atol=1e-5)

    def test_chi2_pins_vertex(self):
        p = DivergencePenalty("chi2", 3)
        u = np.full(3, 1 / 3)
        out = regularized_argmax(p, [10.0, 0.0, 0.0], 1.0, 0.0, 0.01, u)
        np.testing.assert_array_equal(out, [1.0, 0.0, 0.0])
        fn = lambda l: regularized_objective(p, l, [10.0, 0.0, 0.0], 1.0, 0.0, 0.01, u)
        np.testing.assert_allclose(out, grid_argmax(fn, simplex_grid_3()), atol=2e-3)

    @pytest.mark.parametrize("kind", ["kl", "chi2"])
    def test_beats_random_points(self, kind):
        rng = np.random.default_rng(1)
        for _ in range(20):
            K = int(rng.integers(2, 9))
            p = DivergencePenalty(kind, K)
            scores, anchor = rng.normal(size=K), rng.dirichlet(np.ones(K))
            args = (scores, 0.7, 0.3, 0.5, anchor)
            best = regularized_objective(p, regularized_argmax(p, *args), *args)
            pts = rng.dirichlet(np.ones(K), size=1000)
            assert best >= max(regularized_objective(p, q, *args) for q in pts) - 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 16), st.integers(0, 10_000), st.sampled_from(["kl", "chi2"]))
    def test_agrees_with_numeric_maximizer(self, K, seed, kind):
        rng = np.random.default_rng(seed)
        p = DivergencePenalty(kind, K)
        scores, anchor = rng.normal(size=K), rng.dirichlet(np.ones(K))
        step, nu, c = rng.uniform(0.01, 3), rng.choice([0.0, rng.uniform(0.01, 1)]), rng.uniform(0.05, 3)
        closed = regularized_argmax(p, scores, step, nu, c, anchor)
        assert is_simplex(closed)
        np.testing.assert_allclose(closed, numeric_dual_argmax(p, scores, step, nu, c, anchor), atol=1e-8)

    def test_extreme_scores_stay_finite(self):
        p = DivergencePenalty("kl", 4)
        out = regularized_argmax(p, [1e6, -1e6, 0.0, 3.0], 10.0, 0.0, 1e-6, np.full(4, 0.25))
        assert is_simplex(out) and np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1, 0, 0, 0], atol=1e-300)


class TestWorstCaseWeights:
    def test_unpenalized(self):
        lam, R = worst_case_weights(DivergencePenalty("kl", 3), [0.3, 0.9, 0.1], 0.0)
        np.testing.assert_array_equal(lam, [0, 1, 0])
        assert R == 0.9

    def test_ties_go_to_lowest_index(self):
        lam, _ = worst_case_weights(DivergencePenalty("none", 3), [0.9, 0.2, 0.9], 0.0)
        np.testing.assert_array_equal(lam, [1, 0, 0])

    def test_kl_large_nu_near_uniform(self):
        lam, _ = worst_case_weights(KL2, [1.0, 0.0], 100.0)
        np.testing.assert_allclose(lam, [0.5, 0.5], atol=1e-2)
        fn = lambda l: l @ [1.0, 0.0] - 100.0 * penalty_value(KL2, l)
        np.testing.assert_allclose(lam, grid_argmax(fn, simplex_grid_2()), atol=1e-5)

    def test_kl_value(self):
        lam, R = worst_case_weights(KL2, [1.0, 0.0], 1.0)
        assert R == pytest.approx(math.log((math.e + 1) / 2), abs=1e-15)
        fn = lambda l: l @ [1.0, 0.0] - penalty_value(KL2, l)
        g = simplex_grid_2()
        assert R == pytest.approx(max(fn(x) for x in g), abs=1e-9)

    def test_chi2_matches_grid(self):
        p = DivergencePenalty("chi2", 3)
        losses = np.array([0.5, 0.2, 0.9])
        lam, R = worst_case_weights(p, losses, 0.3)
        fn = lambda l: l @ losses - 0.3 * penalty_value(p, l)
        g = simplex_grid_3()
        np.testing.assert_allclose(lam, grid_argmax(fn, g), atol=3e-3)
        assert R == pytest.approx(fn(lam)) and R >= max(fn(x) for x in g) - 1e-12

    def test_vanishing_nu_limit(self):
        losses = np.array([0.2, 0.7, 0.4])
        gaps = [1 - worst_case_weights(DivergencePenalty("kl", 3), losses, nu)[0][1] for nu in (1e-2, 1e-4, 1e-6)]
        assert gaps[0] > gaps[1] >= gaps[2] and gaps[2] < 1e-12
        lam0, _ = worst_case_weights(DivergencePenalty("kl", 3), losses, 0.0)
        np.testing.assert_allclose(worst_case_weights(DivergencePenalty("kl", 3), losses, 1e-6)[0], lam0, atol=1e-12)

    def test_single_group(self):
        for kind in ("kl", "chi2"):
            lam, R = worst_case_weights(DivergencePenalty(kind, 1), [0.4], 0.5)
            assert lam.tolist() == [1.0] and R == pytest.approx(0.4)


class TestTvBound:
    def test_equal_points(self):
        assert tv_squared_bound_check([0.3, 0.7], [0.3, 0.7], KL2)

    def test_vertex_against_uniform(self):
        assert tv_squared_bound_check([1.0, 0.0], [0.5, 0.5], KL2)

    @given(st.integers(2, 12), st.integers(0, 10_000), st.sampled_from(["kl", "chi2"]))
    def test_random_pairs(self, K, seed, kind):
        rng = np.random.default_rng(seed)
        a, b = rng.dirichlet(np.full(K, 0.3)), rng.dirichlet(np.full(K, 0.3))
        assert tv_squared_bound_check(a, b, DivergencePenalty(kind, K))


def test_unknown_kind():
    with pytest.raises(InvalidInputError):
        DivergencePenalty("hellinger", 3)
