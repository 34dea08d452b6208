import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import unit_vector
from gdro.activations import relu
from gdro.data import GeneratorConfig, GroupDataset, generate, sharpness_c0, truncate_labels
from gdro.divergence import DivergencePenalty, regularized_argmax, worst_case_weights
from gdro.oracles import (
    TheoryMonitor,
    brute_force_w_star,
    compute_benchmarks,
    coupled_objective,
    empirical_sharpness_check,
    gap,
    gap_lower_bound,
    grid_slack,
    holds,
    moment_check,
    numeric_dual_argmax,
    risk_vs_opt_certificate,
    sharpness_square_estimate,
    sort_projection,
    worst_case_at,
)
from gdro.solver import SolverConfig, dro_risk, evaluate_losses, run


def solver_cfg(K, **kw):
    base = dict(nu=0.1, eps=1e-3, W=2.0, beta=1.0, B=1.0, c1=0.2, C_M=1.0, K=K)
    base.update(kw)
    return SolverConfig(**base)


def random_simplex(rng, n, K):
    return rng.dirichlet(np.full(K, 0.5), size=n)


class TestHolds:
    def test_relative_tolerance(self):
        assert holds(1.0, 1.0)
        assert holds(1.0 + 1e-12, 1.0)
        assert not holds(1.0 + 1e-6, 1.0)
        assert holds(-5.0, -6.0, rtol=0.5)


class TestWorstCaseAt:
    def test_ties_spread_uniformly(self):
        p = DivergencePenalty("kl", 3)
        np.testing.assert_allclose(worst_case_at(p, np.array([1.0, 3.0, 3.0]), 0.0), [0.0, 0.5, 0.5])

    def test_penalized_matches_closed_form(self):
        losses = np.array([0.3, 0.1, 0.7])
        for kind in ("kl", "chi2"):
            p = DivergencePenalty(kind, 3)
            np.testing.assert_array_equal(worst_case_at(p, losses, 0.2), worst_case_weights(p, losses, 0.2)[0])


class TestBenchmarks:
    def test_realizable(self, small_realizable):
        ds, w = small_realizable
        for kind, nu in [("kl", 0.0), ("kl", 0.1), ("chi2", 0.1)]:
            b = compute_benchmarks(ds, relu(), w, DivergencePenalty(kind, 3), nu, 1e-3 / 12)
            assert b.opt_hat == 0.0
            np.testing.assert_allclose(b.lambda_hat_star, np.full(3, 1 / 3), atol=1e-15)
            assert b.D0 == pytest.approx(0.5 * float(w @ w), abs=1e-15)

    def test_dimension_checked(self, small_realizable):
        ds, _ = small_realizable
        with pytest.raises(ValueError):
            compute_benchmarks(ds, relu(), np.zeros(2), DivergencePenalty("kl", 3), 0.0, 1e-3)

    @pytest.mark.parametrize("kind,nu", [("kl", 0.0), ("kl", 0.05), ("chi2", 0.05)])
    def test_lambda_star_beats_random_points(self, small_noisy, kind, nu):
        ds, w = small_noisy
        p = DivergencePenalty(kind, 3)
        b = compute_benchmarks(ds, relu(), w, p, nu, 1e-4)
        best = coupled_objective(p, nu, b.lambda_hat_star, b.losses_star)
        rng = np.random.default_rng(0)
        for lam in random_simplex(rng, 10_000, 3):
            assert coupled_objective(p, nu, lam, b.losses_star) <= best + 1e-12

    def test_opt_concentrates(self):
        # population value at w* is the noise variance
        w = unit_vector(5, 0.5, seed=1)
        vals = []
        for seed in range(5):
            cfg = GeneratorConfig(K=3, d=5, noise="gaussian", sigma_noise=0.2, W=2.0, seed=seed)
            ds = truncate_labels(generate(cfg, w, relu(), 4000), 2.0, 1.0, 1.0, 1e-3, 1.0)
            vals.append(compute_benchmarks(ds, relu(), w, DivergencePenalty("kl", 3), 0.0, 1e-3).opt_hat)
        assert np.all(np.abs(np.array(vals) - 0.04) < 0.006)
        assert np.std(vals) < 0.003


class TestGap:
    def test_zero_at_saddle(self, small_noisy):
        ds, w = small_noisy
        p = DivergencePenalty("kl", 3)
        b = compute_benchmarks(ds, relu(), w, p, 0.1, 1e-3)
        assert gap(ds, relu(), p, 0.1, w, b.lambda_hat_star, w, b.lambda_hat_star) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3), st.sampled_from(["kl", "chi2"]))
    def test_non_negative_at_w_star(self, raw, kind):
        w = unit_vector(3, 0.5, seed=5)
        ds = generate(GeneratorConfig(K=3, d=3, noise="gaussian", sigma_noise=0.2, seed=4), w, relu(), 50)
        p = DivergencePenalty(kind, 3)
        b = compute_benchmarks(ds, relu(), w, p, 0.1, 1e-3)
        lam = np.array(raw) / sum(raw)
        assert gap(ds, relu(), p, 0.1, w, lam, w, b.lambda_hat_star) >= -1e-12

    def test_lower_bound_orientations_agree_without_penalty(self, small_noisy):
        ds, w = small_noisy
        cfg = solver_cfg(3, nu=0.0)
        b = compute_benchmarks(ds, relu(), w, cfg.penalty, 0.0, cfg.nu0)
        lam = np.array([0.2, 0.3, 0.5])
        wp = w + 0.1
        assert gap_lower_bound(cfg, b, wp, lam, w) == gap_lower_bound(cfg, b, wp, lam, w, orientation="printed")
        expected = -12 * cfg.beta**2 * cfg.B / cfg.c1 * b.opt_hat + 0.5 * cfg.c1 * 3 * 0.01
        assert gap_lower_bound(cfg, b, wp, lam, w) == pytest.approx(expected)


class TestTheoryMonitor:
    def test_realizable_run_satisfies_all_checks(self, small_realizable):
        ds, w = small_realizable
        c1 = min(0.2, sharpness_square_estimate(ds, relu(), w))
        for nu in (0.0, 0.1):
            cfg = solver_cfg(3, nu=nu, c1=c1)
            _, _, trace = run(cfg, ds, relu(), 3000, w_star=w, monitor=TheoryMonitor(cfg, ds, relu(), w))
            diag = trace.diagnostics
            for key in ("gap_lb_ok", "eq5_ok", "lin_ok", "contain_ok"):
                assert diag[key].all(), key
            assert np.all(diag["norm_ratio"] <= 1.0)

    def test_gap_matches_direct_evaluation(self, small_noisy):
        ds, w = small_noisy
        cfg = solver_cfg(3, nu=0.1)
        mon = TheoryMonitor(cfg, ds, relu(), w)
        _, _, trace = run(cfg, ds, relu(), 20, w_star=w, monitor=mon)
        # rebuild the final iterate's gap from scratch
        w_final, lam, _ = run(cfg, ds, relu(), 20)
        direct = gap(ds, relu(), cfg.penalty, 0.1, w_final, lam, w, mon.bench.lambda_hat_star)
        assert trace.diagnostics["gap"][-1] == pytest.approx(direct, rel=1e-10, abs=1e-14)

    def test_linearization_detects_understated_beta(self, small_realizable):
        # ReLU is 1-Lipschitz; claiming beta = 0.5 breaks the per-group inequality
        ds, w = small_realizable
        cfg = solver_cfg(3, nu=0.0, beta=0.5, c1=1e-3)
        _, _, trace = run(cfg, ds, relu(), 50, w_star=w, monitor=TheoryMonitor(cfg, ds, relu(), w))
        assert not trace.diagnostics["lin_ok"].all()


class TestBruteForce:
    def test_realizable_on_grid(self):
        w = np.array([0.5, -0.3])
        ds = generate(GeneratorConfig(K=2, d=2, seed=0), w, relu(), 200)
        w_hat, risk = brute_force_w_star(ds, relu(), DivergencePenalty("kl", 2), 0.0, 2.0, 201)
        np.testing.assert_allclose(w_hat, w, atol=1e-12)
        assert risk == pytest.approx(0.0, abs=1e-24)

    @pytest.mark.parametrize("kind,nu", [("kl", 0.0), ("kl", 0.1), ("chi2", 0.1)])
    def test_one_dimensional_against_dense_scan(self, kind, nu):
        w = np.array([0.7])
        cfg = GeneratorConfig(K=3, d=1, marginal="shifted_gaussian", shifts=[[0.0], [0.5], [-0.4]], noise="gaussian", sigma_noise=0.3, seed=2)
        ds = generate(cfg, w, relu(), 200)
        p = DivergencePenalty(kind, 3)
        dense = np.linspace(-2.0, 2.0, 40_001)
        ref = min(dro_risk(ds, relu(), np.array([v]), p, nu) for v in dense[::10])
        _, risk = brute_force_w_star(ds, relu(), p, nu, 2.0, 201)
        assert ref - 1e-12 <= risk <= ref + grid_slack(ds, relu(), 2.0, 201)

    def test_zero_radius(self, small_noisy):
        ds, _ = small_noisy
        w_hat, risk = brute_force_w_star(ds, relu(), DivergencePenalty("kl", 3), 0.0, 0.0)
        assert not w_hat.any()
        assert risk == evaluate_losses(ds, relu(), np.zeros(3)).max()

    def test_refuses_high_dimension(self, small_realizable):
        ds, _ = small_realizable
        with pytest.raises(ValueError):
            brute_force_w_star(ds, relu(), DivergencePenalty("kl", 3), 0.0, 1.0)


class TestSharpness:
    @pytest.fixture
    def gaussian(self):
        w = unit_vector(10, 0.5, seed=0)
        ds = generate(GeneratorConfig(K=3, d=10, seed=1), w, relu(), 3000)
        return ds, w

    def test_formula_constant_holds(self, gaussian):
        ds, w = gaussian
        c0 = sharpness_c0(0.5, 0.3, 1.0, 1.0)
        rep = empirical_sharpness_check(ds, relu(), w, c0)
        assert rep.passed and rep.violations == 0 and rep.worst_margin > 0

    def test_inflated_constant_is_caught(self, gaussian):
        ds, w = gaussian
        rep = empirical_sharpness_check(ds, relu(), w, 1000 * sharpness_c0(0.5, 0.3, 1.0, 1.0))
        assert not rep.passed and rep.violations > 0

    def test_square_estimate_range(self, gaussian):
        ds, w = gaussian
        est = sharpness_square_estimate(ds, relu(), w)
        # ReLU is 1-Lipschitz and the covariance is close to the identity
        assert 0 < est < 1.2

    def test_rejects_non_positive(self, gaussian):
        ds, w = gaussian
        with pytest.raises(ValueError):
            empirical_sharpness_check(ds, relu(), w, 0.0)


class TestMoments:
    def test_gaussian(self):
        ds = generate(GeneratorConfig(K=2, d=5, seed=0), np.zeros(5), relu(), 5000)
        two = moment_check(ds, 2, 6.0)
        four = moment_check(ds, 4, 6.0)
        assert two.passed and abs(two.max_moment - 1.0) < 0.15
        assert four.passed and 2.5 < four.max_moment < 4.0
        assert not moment_check(ds, 4, 2.0).passed

    @pytest.mark.parametrize("tau,bound", [(3, 1.0), (2, 0.0)])
    def test_invalid(self, tau, bound):
        ds = GroupDataset([np.ones((2, 2))], [np.zeros(2)])
        with pytest.raises(ValueError):
            moment_check(ds, tau, bound)


class TestRiskCertificate:
    def test_at_planted_parameter(self, small_realizable):
        ds, w = small_realizable
        cfg = solver_cfg(3)
        cert = risk_vs_opt_certificate(w, ds, relu(), cfg.penalty, cfg.nu, w, cfg)
        assert cert.distance == 0 and cert.distance_ok and cert.mixture_ok
        assert cert.distance_bound == pytest.approx(cfg.C3 * math.sqrt(cfg.eps))
        assert cert.mixture_bound == pytest.approx(20 * cfg.C3**2 * cfg.eps)

    def test_far_point_fails_distance(self, small_realizable):
        ds, w = small_realizable
        cfg = solver_cfg(3, c1=1e4)
        cert = risk_vs_opt_certificate(w + 1.0, ds, relu(), cfg.penalty, cfg.nu, w, cfg)
        assert not cert.distance_ok
        assert cert.distance_sq_ratio > 1


class TestNumericArgmax:
    def test_sort_projection_examples(self):
        np.testing.assert_allclose(sort_projection([0.5, 0.5]), [0.5, 0.5])
        np.testing.assert_allclose(sort_projection([2.0, 0.0]), [1.0, 0.0])
        np.testing.assert_allclose(sort_projection([1.0, 1.0, 1.0]), np.full(3, 1 / 3))

    @pytest.mark.parametrize("kind", ["kl", "chi2", "none"])
    def test_agrees_with_closed_form(self, kind):
        rng = np.random.default_rng(3)
        p = DivergencePenalty(kind, 4)
        for _ in range(50):
            scores = rng.normal(size=4)
            anchor = rng.dirichlet(np.ones(4))
            args = (scores, rng.uniform(0.1, 2), rng.uniform(0, 1), rng.uniform(0.05, 1), anchor)
            np.testing.assert_allclose(numeric_dual_argmax(p, *args), regularized_argmax(p, *args), atol=1e-8)

    def test_chi2_boundary_solution(self):
        p = DivergencePenalty("chi2", 3)
        lam = numeric_dual_argmax(p, np.array([10.0, 0.0, 0.0]), 1.0, 0.0, 0.1, np.full(3, 1 / 3))
        np.testing.assert_allclose(lam, [1.0, 0.0, 0.0], atol=1e-10)
