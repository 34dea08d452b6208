"""Reference computations and the trajectory checks built on them.

Everything here is evaluated directly from its definition (grid search,
plain sample means) so it can ground the solver's outputs independently.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from gdro.activations import ActivationSpec
from gdro.data import GroupDataset
from gdro.divergence import (
    DivergencePenalty,
    bregman,
    penalized_value,
    penalty_value,
    worst_case_weights,
)
from gdro.solver import SolverConfig, SolverState, evaluate_losses

REL_TOL = 1e-9


def holds(lhs: float, rhs: float, rtol: float = REL_TOL) -> bool:
    """``lhs <= rhs`` up to a relative tolerance on the larger magnitude."""
    return bool(lhs <= rhs + rtol * max(abs(lhs), abs(rhs)))


@dataclass
class Benchmarks:
    opt_hat: float
    lambda_hat_star: np.ndarray
    D0: float
    losses_star: np.ndarray

    def to_dict(self) -> dict:
        return {
            "opt_hat": self.opt_hat,
            "lambda_hat_star": self.lambda_hat_star.tolist(),
            "D0": self.D0,
            "losses_star": self.losses_star.tolist(),
        }


def worst_case_at(divergence: DivergencePenalty, losses: np.ndarray, nu: float) -> np.ndarray:
    """Worst-case weights, spreading mass uniformly over tied maxima when unpenalized.

    Any maximizer is admissible; among the unpenalized ones the uniform mix
    over the tied groups is closest to the uniform starting weights.
    """
    if nu == 0 or divergence.kind == "none":
        top = losses == losses.max()
        return top / top.sum()
    return worst_case_weights(divergence, losses, nu)[0]


def compute_benchmarks(
    ds: GroupDataset, activation: ActivationSpec, w_star, divergence: DivergencePenalty, nu: float, nu0: float
) -> Benchmarks:
    w_star = np.asarray(w_star, dtype=float)
    if w_star.shape != (ds.d,):
        raise ValueError("w_star dimension does not match the dataset")
    losses = evaluate_losses(ds, activation, w_star)
    lam_star = worst_case_at(divergence, losses, nu)
    D0 = 0.5 * float(w_star @ w_star) + nu0 * bregman(divergence, lam_star, divergence.uniform)
    return Benchmarks(float(losses.max()), lam_star, D0, losses)


def coupled_objective(divergence, nu, lam, losses) -> float:
    return penalized_value(divergence, lam, losses, nu)


def gap(ds, activation, divergence, nu, w, lam, w_star, lambda_hat_star) -> float:
    """``L(w, lambda*) - L(w*, lam)`` for the coupled objective ``L``."""
    lw = evaluate_losses(ds, activation, w)
    ls = evaluate_losses(ds, activation, w_star)
    return coupled_objective(divergence, nu, lambda_hat_star, lw) - coupled_objective(divergence, nu, lam, ls)


def _scaled_bregman(weight: float, p, a, b) -> float:
    # 0 * inf is 0 here: an unpenalized term contributes nothing
    return 0.0 if weight == 0 else weight * bregman(p, a, b)


def gap_lower_bound(cfg: SolverConfig, bench: Benchmarks, w, lam, w_star, orientation: str = "derived") -> float:
    """Lower bound on the gap at ``(w, lam)``.

    ``orientation="derived"`` measures the dual term as ``D(lam, lambda*)``,
    which is what strong concavity around the maximizer ``lambda*`` gives;
    ``"printed"`` swaps the arguments.
    """
    diff = np.asarray(w) - np.asarray(w_star)
    p = cfg.penalty
    a, b = (lam, bench.lambda_hat_star) if orientation == "derived" else (bench.lambda_hat_star, lam)
    return (
        -12 * cfg.beta**2 * cfg.B / cfg.c1 * bench.opt_hat
        + 0.5 * cfg.c1 * float(diff @ diff)
        + _scaled_bregman(cfg.nu, p, a, b)
    )


class TheoryMonitor:
    """Per-iteration checks of the convergence analysis against a known ``w_star``.

    Reports, at each iterate: the gap and its lower bound, the potential
    inequality (with the loose ``120`` constant and the tighter ``40``
    variant), the per-group linearization inequality and containment in
    the ball of radius ``3 ||w_star||``.
    """

    def __init__(self, cfg: SolverConfig, ds: GroupDataset, activation: ActivationSpec, w_star, rtol: float = REL_TOL):
        self.cfg = cfg
        self.rtol = rtol
        self.p = cfg.penalty
        packed = ds.packed
        self.starts, self.counts = packed.starts, packed.counts
        self.w_star = np.asarray(w_star, dtype=float)
        self.bench = compute_benchmarks(ds, activation, self.w_star, self.p, cfg.nu, cfg.nu0)
        self.z_star = packed.X @ self.w_star
        self.r_star = activation.value(self.z_star) - packed.y
        self.radius = 3.0 * math.sqrt(float(self.w_star @ self.w_star))
        self.pen_star = cfg.nu * penalty_value(self.p, self.bench.lambda_hat_star)
        self.k_opt = cfg.beta**2 * cfg.B / cfg.c1
        self._buf = np.empty((2, packed.y.size))

    def observe(self, state: SolverState, losses: np.ndarray, z: np.ndarray, residual: np.ndarray) -> dict:
        cfg, bench, p, k_opt = self.cfg, self.bench, self.p, self.k_opt
        w, lam, A = state.w_curr, state.lambda_curr, state.A_curr
        lam_star = bench.lambda_hat_star
        diff = w - self.w_star
        dist_sq = float(diff @ diff)
        norm = math.sqrt(float(w @ w))

        g = (float(lam_star @ losses) - self.pen_star) - (
            float(lam @ bench.losses_star) - cfg.nu * penalty_value(p, lam)
        )
        d_star_to_t = bregman(p, lam_star, lam)
        base = -12 * k_opt * bench.opt_hat + 0.5 * cfg.c1 * dist_sq
        lb = base + _scaled_bregman(cfg.nu, p, lam, lam_star)
        lb_printed = base + (0.0 if cfg.nu == 0 else cfg.nu * d_star_to_t)

        eq5_lhs = (1 + 0.5 * cfg.c1 * A) / 4 * dist_sq + (cfg.nu0 + cfg.nu * A) * d_star_to_t
        eq5_rhs = bench.D0 + 120 * k_opt * A * (bench.opt_hat + cfg.eps)
        eq5_rhs_strict = bench.D0 + 40 * k_opt * A * bench.opt_hat

        # row 0: r (s* - s) = r (r* - r); row 1: r (z* - z)
        buf = self._buf
        np.subtract(self.r_star, residual, out=buf[0])
        np.subtract(self.z_star, z, out=buf[1])
        buf *= residual
        sums = np.add.reduceat(buf, self.starts, axis=1) / self.counts
        lin_lhs = 2.0 * sums[0]
        lin_rhs = (2.0 * cfg.beta) * sums[1] - (24 * k_opt * bench.opt_hat + 0.25 * cfg.c1 * dist_sq)
        scale = np.maximum(np.abs(lin_lhs), np.abs(lin_rhs))
        lin_slack = lin_lhs - lin_rhs + self.rtol * scale
        lin_min = float(lin_slack.min())

        return {
            "gap": g,
            "gap_lb": lb,
            "gap_lb_ok": holds(lb, g, self.rtol),
            "gap_lb_printed_ok": holds(lb_printed, g, self.rtol),
            "eq5_lhs": eq5_lhs,
            "eq5_rhs": eq5_rhs,
            "eq5_ok": holds(eq5_lhs, eq5_rhs, self.rtol),
            "eq5_strict_ok": holds(eq5_lhs, eq5_rhs_strict, self.rtol),
            "lin_min_slack": lin_min,
            "lin_ok": lin_min >= 0,
            "norm_ratio": norm / self.radius if self.radius > 0 else math.inf,
            "contain_ok": norm <= self.radius * (1 + 1e-12),
        }


def grid_points(d: int, W: float, resolution: int) -> np.ndarray:
    axis = np.linspace(-W, W, resolution)
    mesh = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return mesh[np.einsum("ij,ij->i", mesh, mesh) <= W * W * (1 + 1e-12)]


def _risks(ds, activation, divergence, nu, G: np.ndarray, chunk: int = 4096) -> np.ndarray:
    p = ds.packed
    out = np.empty(len(G))
    for s in range(0, len(G), chunk):
        Z = p.X @ G[s : s + chunk].T
        R = activation.value(Z) - p.y[:, None]
        losses = p.group_mean(R * R)  # (K, m)
        for j in range(losses.shape[1]):
            out[s + j] = worst_case_weights(divergence, losses[:, j], nu)[1]
    return out


def brute_force_w_star(ds, activation, divergence, nu, W, grid_resolution: int = 201):
    """Minimize the DRO risk over a uniform grid of the ball; only for ``d <= 3``."""
    if ds.d > 3:
        raise ValueError("grid search refused for d > 3")
    if W == 0:
        return np.zeros(ds.d), float(worst_case_weights(divergence, evaluate_losses(ds, activation, np.zeros(ds.d)), nu)[1])
    G = grid_points(ds.d, W, grid_resolution)
    risks = _risks(ds, activation, divergence, nu, G)
    j = int(np.argmin(risks))
    return G[j], float(risks[j])


def grid_slack(ds, activation: ActivationSpec, W: float, grid_resolution: int) -> float:
    """Worst-case risk increase from rounding a point of the ball to the grid.

    Each group loss is Lipschitz on the ball with constant at most
    ``2 beta E[(beta W |x| + |y|) |x|]``; the DRO risk inherits the largest
    of these, and a grid cell has half-diagonal ``h sqrt(d) / 2``.
    """
    lips = [
        2 * activation.beta * np.mean((activation.beta * W * np.linalg.norm(x, axis=1) + np.abs(y)) * np.linalg.norm(x, axis=1))
        for x, y in zip(ds.xs, ds.ys)
    ]
    h = 2 * W / (grid_resolution - 1)
    return float(max(lips) * h * math.sqrt(ds.d) / 2)


def _ball_probes(center: np.ndarray, radius: float, n: int, min_dist: float, rng) -> np.ndarray:
    d = center.size
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 1000 * n:
            raise RuntimeError("could not place probes outside the exclusion radius")
        u = rng.standard_normal(d)
        w = u / np.linalg.norm(u) * radius * rng.uniform() ** (1.0 / d)
        if np.linalg.norm(w - center) >= min_dist:
            out.append(w)
    return np.array(out)


@dataclass
class SharpnessReport:
    c0: float
    n_probes: int
    violations: int
    worst_margin: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def empirical_sharpness_check(
    ds, activation: ActivationSpec, w_star, c0: float, n_probes: int = 200, seed=0, eps: float = 1e-3
) -> SharpnessReport:
    """Check ``E[(s(w.x) - s(w*.x)) (w - w*).x] >= (c0/2) ||w - w*||^2`` per group at random probes.

    Probes are uniform in the ball of radius ``3 ||w*||`` and at least
    ``sqrt(eps)`` away from ``w*``.  ``worst_margin`` is the smallest value
    of (left - right) / ||w - w*||^2 over probes and groups.
    """
    if c0 <= 0:
        raise ValueError("c0 must be positive")
    w_star = np.asarray(w_star, dtype=float)
    rng = np.random.default_rng(seed)
    probes = _ball_probes(w_star, 3 * np.linalg.norm(w_star), n_probes, math.sqrt(eps), rng)
    p = ds.packed
    s_star = activation.value(p.X @ w_star)
    D = probes - w_star
    Z = p.X @ probes.T
    lhs = p.group_mean((activation.value(Z) - s_star[:, None]) * (p.X @ D.T))  # (K, n_probes)
    dd = np.einsum("ij,ij->i", D, D)
    margin = lhs / dd - 0.5 * c0
    violations = int(np.sum(margin < 0))
    return SharpnessReport(c0, n_probes, violations, float(margin.min()), violations == 0)


def sharpness_square_estimate(ds, activation, w_star, n_probes: int = 500, seed=0, eps: float = 1e-3) -> float:
    """Smallest ``E[(s(w.x) - s(w*.x))^2] / ||w - w*||^2`` seen over random probes and groups.

    An upper estimate of the largest admissible ``c1`` for this dataset.
    """
    w_star = np.asarray(w_star, dtype=float)
    rng = np.random.default_rng(seed)
    probes = _ball_probes(w_star, 3 * np.linalg.norm(w_star), n_probes, math.sqrt(eps), rng)
    p = ds.packed
    s_star = activation.value(p.X @ w_star)
    R = activation.value(p.X @ probes.T) - s_star[:, None]
    D = probes - w_star
    return float((p.group_mean(R * R) / np.einsum("ij,ij->i", D, D)).min())


@dataclass
class MomentReport:
    tau: int
    bound: float
    max_moment: float
    violations: int
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def moment_check(ds: GroupDataset, tau: int, bound: float, n_directions: int = 200, seed=0) -> MomentReport:
    if tau not in (2, 4):
        raise ValueError("tau must be 2 or 4")
    if bound <= 0:
        raise ValueError("bound must be positive")
    u = np.random.default_rng(seed).standard_normal((n_directions, ds.d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    moments = np.array([np.mean((x @ u.T) ** tau, axis=0) for x in ds.xs])
    violations = int(np.sum(moments > bound))
    return MomentReport(tau, bound, float(moments.max()), violations, violations == 0)


@dataclass
class RiskCertificate:
    distance: float
    opt_hat: float
    distance_bound: float
    distance_ok: bool
    mixture_loss: float
    mixture_bound: float
    mixture_ok: bool
    distance_sq_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)


def risk_vs_opt_certificate(
    w_hat, ds, activation, divergence, nu, w_star, cfg: SolverConfig, holdout: GroupDataset | None = None
) -> RiskCertificate:
    """Distance and worst-case-mixture loss guarantees at the output ``w_hat``.

    The population mixture is approximated by the empirical worst-case
    weights applied to ``holdout`` (or to ``ds`` when no holdout is given).
    """
    w_hat = np.asarray(w_hat, dtype=float)
    bench = compute_benchmarks(ds, activation, w_star, divergence, nu, cfg.nu0)
    dist = float(np.linalg.norm(w_hat - np.asarray(w_star)))
    dist_bound = cfg.C3 * (math.sqrt(bench.opt_hat) + math.sqrt(cfg.eps))
    evalset = ds if holdout is None else holdout
    mix = float(bench.lambda_hat_star @ evaluate_losses(evalset, activation, w_hat))
    c3sq = cfg.C3**2
    mix_bound = (2 + 20 * cfg.B * cfg.beta**2 * c3sq) * bench.opt_hat + 20 * cfg.beta**2 * c3sq * cfg.B * cfg.eps
    ratio = dist**2 / dist_bound**2 if dist_bound > 0 else math.inf
    return RiskCertificate(dist, bench.opt_hat, dist_bound, dist <= dist_bound, mix, mix_bound, mix <= mix_bound, ratio)


def sort_projection(v) -> np.ndarray:
    """Euclidean projection onto the simplex by sorting (a route independent of bisection)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = k[u - css / k > 0][-1]
    return np.maximum(v - css[rho - 1] / rho, 0.0)


def _dual_gradient(p: DivergencePenalty, lam, scores, step, nu, breg_weight, anchor) -> np.ndarray:
    """Gradient of ``step*(<lam, scores> - nu*d(lam, u)) - breg_weight*D(lam, anchor)``."""
    K = lam.size
    if p.bregman_kind == "kl":
        return step * scores - step * nu * (np.log(K * lam) + 1.0) - breg_weight * (np.log(lam / anchor) + 1.0)
    return step * scores - 2.0 * K * step * nu * (lam - 1.0 / K) - 2.0 * K * breg_weight * (lam - anchor)


def numeric_dual_argmax(
    p: DivergencePenalty, scores, step, nu, breg_weight, anchor, tol: float = 1e-12, max_iter: int = 10_000
) -> np.ndarray:
    """Maximize the dual-step objective numerically, without its closed form.

    KL: damped Newton on the equality-constrained optimality system, kept in
    the interior by a fraction-to-boundary rule.  Chi-squared: projected
    gradient ascent with the sorting projection.  Both stop once the
    optimality residual falls below ``tol`` (relative to the gradient scale).
    """
    scores = np.asarray(scores, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    nu = 0.0 if p.kind == "none" else float(nu)
    K = scores.size
    lam = np.full(K, 1.0 / K)
    if p.bregman_kind == "kl":
        curv = step * nu + breg_weight
        for _ in range(max_iter):
            g = _dual_gradient(p, lam, scores, step, nu, breg_weight, anchor)
            # Hessian is -curv/lam (diagonal); solve for the step with sum(delta) = 0
            hinv = lam / curv
            mu = (hinv @ g) / hinv.sum()
            delta = hinv * (g - mu)
            resid = np.max(np.abs(g - mu) * np.minimum(lam, 1.0))
            if resid <= tol * (1.0 + np.max(np.abs(g))) and np.max(np.abs(delta)) <= tol:
                break
            neg = delta < 0
            t = min(1.0, 0.99 * np.min(-lam[neg] / delta[neg])) if neg.any() else 1.0
            lam = lam + t * delta
            lam = np.maximum(lam, np.finfo(float).tiny)
            lam /= lam.sum()
        return lam

    eta = 0.5 / (2.0 * K * (step * nu + breg_weight))
    for _ in range(max_iter):
        g = _dual_gradient(p, lam, scores, step, nu, breg_weight, anchor)
        new = sort_projection(lam + eta * g)
        if np.max(np.abs(new - lam)) / eta <= tol * (1.0 + np.max(np.abs(g))):
            return new
        lam = new
    return lam
