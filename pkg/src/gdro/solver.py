"""Primal-dual Group DRO solver with dual extrapolation.

Each iteration advances the step-size schedule, extrapolates the group
weights, takes a proximal surrogate-gradient step on the primal variable
(projected onto the ball of radius ``W``) and a Bregman-proximal ascent step
on the weights using the losses at the new primal iterate.
"""

from __future__ import annotations

import math
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from gdro.activations import ActivationSpec
from gdro.data import GroupDataset, Packed
from gdro.divergence import DivergencePenalty, _kl_argmax, regularized_argmax, worst_case_weights


class NumericalError(RuntimeError):
    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


class UntruncatedLabelsError(ValueError):
    pass


def derived_constants(nu, eps, W, beta, B, c1, C_M, K) -> dict[str, float]:
    C_W = math.sqrt(6 * beta**2 + C_M**2 * B * math.log(beta * B * W / eps) ** 2)
    return {
        "nu0": eps / (4 * K),
        "C3": 31 * beta * math.sqrt(B) / c1,
        "C4": 27 * c1 + 2163 * beta**4 * B**2 / c1,
        "C_W": C_W,
        "C_W_prime": 2 * math.sqrt(3) * C_W * beta * W * B,
    }


@dataclass(frozen=True)
class SolverConfig:
    nu: float
    eps: float
    W: float
    beta: float
    B: float
    c1: float
    C_M: float
    K: int
    max_iters: int = 10_000
    divergence: str = "kl"
    nu0: float = field(init=False)
    C3: float = field(init=False)
    C4: float = field(init=False)
    C_W: float = field(init=False)
    C_W_prime: float = field(init=False)

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("nu must be non-negative")
        if min(self.eps, self.W, self.beta, self.B, self.c1, self.C_M) <= 0:
            raise ValueError("eps, W, beta, B, c1 and C_M must be positive")
        if self.K < 1:
            raise ValueError("K must be a positive integer")
        if self.divergence == "none" and self.nu != 0:
            raise ValueError("divergence 'none' requires nu = 0")
        DivergencePenalty(self.divergence, self.K)  # validates the name
        for k, v in derived_constants(*self.primitives()).items():
            object.__setattr__(self, k, v)

    def primitives(self) -> tuple:
        return (self.nu, self.eps, self.W, self.beta, self.B, self.c1, self.C_M, self.K)

    @property
    def penalty(self) -> DivergencePenalty:
        return DivergencePenalty(self.divergence, self.K)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        derived = {"nu0", "C3", "C4", "C_W", "C_W_prime"}
        return cls(**{k: v for k, v in d.items() if k not in derived})


@dataclass
class SolverState:
    t: int
    w_prev: np.ndarray
    w_curr: np.ndarray
    lambda_prev: np.ndarray
    lambda_curr: np.ndarray
    a_prev: float = 0.0
    a_curr: float = 0.0
    A_prev: float = 0.0
    A_curr: float = 0.0

    @classmethod
    def initial(cls, d: int, K: int) -> "SolverState":
        u = np.full(K, 1.0 / K)
        return cls(0, np.zeros(d), np.zeros(d), u.copy(), u.copy())


@dataclass(frozen=True)
class TraceRecord:
    t: int
    losses: np.ndarray
    a_t: float
    A_t: float
    lambdas: np.ndarray
    dist_sq_to_wstar: float | None
    diagnostics: dict
    wall_clock: float


class Trace(Sequence):
    """Per-iteration trace stored column-wise; indexing yields ``TraceRecord``."""

    def __init__(self, a, A, losses, lambdas, dist_sq, diagnostics, wall_clock):
        self.a = np.asarray(a)
        self.A = np.asarray(A)
        self.losses = np.asarray(losses)
        self.lambdas = np.asarray(lambdas)
        self.dist_sq = None if dist_sq is None else np.asarray(dist_sq)
        self.diagnostics = {k: np.asarray(v) for k, v in diagnostics.items()}
        self.wall_clock = np.asarray(wall_clock)

    def __len__(self) -> int:
        return len(self.a)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return TraceRecord(
            t=i + 1,
            losses=self.losses[i],
            a_t=float(self.a[i]),
            A_t=float(self.A[i]),
            lambdas=self.lambdas[i],
            dist_sq_to_wstar=None if self.dist_sq is None else float(self.dist_sq[i]),
            diagnostics={k: v[i].item() for k, v in self.diagnostics.items()},
            wall_clock=float(self.wall_clock[i]),
        )

    @property
    def t(self) -> np.ndarray:
        return np.arange(1, len(self) + 1)


class Monitor(Protocol):
    """Called after every iteration with the new state, its group losses, the
    pre-activations ``X w_t`` and the residuals ``s(X w_t) - y``."""

    def observe(self, state: SolverState, losses: np.ndarray, z: np.ndarray, residual: np.ndarray) -> dict: ...


def _log_step_branches(cfg: SolverConfig, t):
    t = np.asarray(t, dtype=float)
    lb1 = (t - 1) * math.log1p(cfg.c1 / (8 * cfg.C4)) - math.log(4 * cfg.C4)
    rate = math.sqrt(cfg.c1 * cfg.nu) / (4 * math.sqrt(2) * cfg.C_W_prime)
    lb2 = (t - 1) * math.log1p(rate) + math.log(math.sqrt(cfg.nu0) / (4 * cfg.C_W_prime))
    lb3 = np.log(cfg.c1 * cfg.nu0 * t / (4 * math.sqrt(2) * cfg.C_W_prime) ** 2)
    return lb1, lb2, lb3


def step_sizes(cfg: SolverConfig, t) -> np.ndarray:
    """Vectorized schedule ``a_t`` for an array of iteration indices ``t >= 1``."""
    lb1, lb2, lb3 = _log_step_branches(cfg, t)
    return np.exp(np.minimum(lb1, np.maximum(lb2, lb3)))


def step_size(cfg: SolverConfig, t: int) -> float:
    if t < 1:
        raise ValueError("t must be >= 1")
    return float(step_sizes(cfg, np.array([t]))[0])


def surrogate_gradient(activation: ActivationSpec, w, x, y: float, beta: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return 2.0 * beta * (float(activation.value(np.dot(w, x))) - y) * x


def _weighted_gradient(packed: Packed, residual: np.ndarray, weights: np.ndarray, beta: float) -> np.ndarray:
    coef = np.repeat((2.0 * beta) * weights / packed.counts, packed.counts)
    coef *= residual
    return packed.XT @ coef


def averaged_gradient(ds: GroupDataset, activation: ActivationSpec, w, weights, beta: float) -> np.ndarray:
    """Weighted sum over groups of the mean surrogate gradient; weights may be negative."""
    p = ds.packed
    residual = activation.value(p.X @ np.asarray(w, dtype=float)) - p.y
    return _weighted_gradient(p, residual, np.asarray(weights, dtype=float), beta)


def extrapolate_dual(lambda_curr, lambda_prev, a_prev: float, a_curr: float) -> np.ndarray:
    """Momentum step on the group weights; the result may leave the simplex."""
    if a_curr <= 0:
        raise ValueError("a_curr must be positive")
    lambda_curr = np.asarray(lambda_curr, dtype=float)
    return lambda_curr + (a_prev / a_curr) * (lambda_curr - np.asarray(lambda_prev, dtype=float))


def project_ball(w: np.ndarray, radius: float) -> np.ndarray:
    norm = math.sqrt(float(w @ w))
    if norm == math.inf:
        # the squared norm overflowed; rescale before measuring
        top = float(np.abs(w).max())
        if math.isfinite(top):
            norm = top * math.sqrt(float(np.sum((w / top) ** 2)))
    return w if norm <= radius else w * (radius / norm)


def primal_step(cfg: SolverConfig, state: SolverState, g) -> np.ndarray:
    """Minimizer over the ball of the linearized objective plus the growing proximal term.

    Steps from ``state.w_curr`` using the already-advanced ``a_t`` and ``A_t``.
    """
    eta = state.a_curr / (1.0 + 0.5 * cfg.c1 * state.A_curr)
    return project_ball(state.w_curr - eta * np.asarray(g, dtype=float), cfg.W)


def dual_step(cfg: SolverConfig, state: SolverState, group_losses) -> np.ndarray:
    # loss weight uses a_t while the Bregman weight uses A_{t-1}
    if cfg.divergence != "chi2":
        # KL base (also used for "none"); losses are finite and a_t > 0 inside run()
        nu = cfg.nu if cfg.divergence == "kl" else 0.0
        if state.a_curr > 0:
            return _kl_argmax(
                np.asarray(group_losses, dtype=float), state.a_curr, cfg.nu0 + cfg.nu * state.A_prev, nu, cfg.K,
                state.lambda_curr,
            )
    return regularized_argmax(
        cfg.penalty,
        group_losses,
        step=state.a_curr,
        nu=cfg.nu,
        breg_weight=cfg.nu0 + cfg.nu * state.A_prev,
        anchor=state.lambda_curr,
    )


def evaluate_losses(ds: GroupDataset, activation: ActivationSpec, w) -> np.ndarray:
    p = ds.packed
    r = activation.value(p.X @ np.asarray(w, dtype=float)) - p.y
    return p.group_mean(r * r)


def dro_risk(ds: GroupDataset, activation: ActivationSpec, w, divergence: DivergencePenalty, nu: float) -> float:
    return worst_case_weights(divergence, evaluate_losses(ds, activation, w), nu)[1]


def run(
    cfg: SolverConfig,
    ds: GroupDataset,
    activation: ActivationSpec,
    n_iters: int | None = None,
    *,
    w_star=None,
    monitor: Monitor | None = None,
    allow_untruncated: bool = False,
) -> tuple[np.ndarray, np.ndarray, Trace]:
    """Run the primal-dual iteration for ``n_iters`` steps (default ``cfg.max_iters``).

    ``w_star`` defaults to the planted parameter in the dataset metadata and
    only feeds the distance column of the trace.
    """
    n_iters = cfg.max_iters if n_iters is None else n_iters
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if ds.K != cfg.K:
        raise ValueError(f"dataset has {ds.K} groups but the config expects {cfg.K}")
    if ds.truncation_M is None and not allow_untruncated:
        raise UntruncatedLabelsError("labels are not truncated; truncate them or pass allow_untruncated=True")
    if w_star is None:
        w_star = ds.w_star
    w_star = None if w_star is None else np.asarray(w_star, dtype=float)

    p = ds.packed
    K = cfg.K
    state = SolverState.initial(ds.d, K)
    a_sched = step_sizes(cfg, np.arange(1, n_iters + 1))

    a_col = np.empty(n_iters)
    A_col = np.empty(n_iters)
    loss_col = np.empty((n_iters, K))
    lam_col = np.empty((n_iters, K))
    dist_col = None if w_star is None else np.empty(n_iters)
    wall = np.empty(n_iters)
    diags: dict[str, list] = {}

    # both products read the transposed copy only, so one matrix stays in cache
    XT = p.XT
    residual = activation.value(state.w_curr @ XT) - p.y
    t0 = time.perf_counter()
    for t in range(1, n_iters + 1):
        a_t = float(a_sched[t - 1])
        state.t = t
        state.a_prev, state.a_curr = state.a_curr, a_t
        state.A_prev, state.A_curr = state.A_curr, state.A_curr + a_t

        lam_bar = extrapolate_dual(state.lambda_curr, state.lambda_prev, state.a_prev, a_t)
        g = _weighted_gradient(p, residual, lam_bar, cfg.beta)
        w_new = primal_step(cfg, state, g)

        z = w_new @ XT
        residual = activation.value(z) - p.y
        losses = p.group_mean(residual * residual)
        # losses are non-negative, so a finite total means every entry is finite
        if not math.isfinite(losses.sum()):
            raise NumericalError(t, "non-finite group loss")

        lam_new = dual_step(cfg, state, losses)
        state.w_prev, state.w_curr = state.w_curr, w_new
        state.lambda_prev, state.lambda_curr = state.lambda_curr, lam_new

        i = t - 1
        a_col[i] = a_t
        A_col[i] = state.A_curr
        loss_col[i] = losses
        lam_col[i] = lam_new
        if dist_col is not None:
            diff = w_new - w_star
            dist_col[i] = diff @ diff
        if monitor is not None:
            for k, v in monitor.observe(state, losses, z, residual).items():
                diags.setdefault(k, []).append(v)
        wall[i] = time.perf_counter() - t0

    trace = Trace(a_col, A_col, loss_col, lam_col, dist_col, diags, wall)
    return state.w_curr, state.lambda_curr, trace


@dataclass
class IterationBudget:
    n_schedule: int | None
    n_formula: int
    A_target: float
    D0_proxy: float

    def to_dict(self) -> dict:
        return asdict(self)


def max_dual_distance(p: DivergencePenalty) -> float:
    """Largest Bregman distance from a simplex vertex to the uniform weights."""
    return math.log(p.K) if p.bregman_kind == "kl" else float(p.K - 1)


def compute_iteration_budget(
    cfg: SolverConfig, w_norm: float | None = None, dual_distance: float | None = None, cap: int = 10**8
) -> IterationBudget:
    """Iterations after which the distance guarantee's initial-potential term drops below ``eps``.

    ``n_schedule`` walks the actual step-size schedule until
    ``4 D0 / (1 + 0.5 c1 A_n) <= eps``.  ``n_formula`` is the closed-form
    order estimate with its hidden constant set to one.  The unknown
    ``||w_star||`` is replaced by ``W`` unless ``w_norm`` is given.
    ``n_schedule`` is ``None`` when the walk passes ``cap`` iterations.
    """
    w_norm = cfg.W if w_norm is None else w_norm
    dual = max_dual_distance(cfg.penalty) if dual_distance is None else dual_distance
    D0 = 0.5 * w_norm**2 + cfg.nu0 * dual
    A_target = 2.0 * (4.0 * D0 / cfg.eps - 1.0) / cfg.c1

    A, start, chunk = 0.0, 1, 1 << 20
    n_sched = None
    while start <= cap:
        a = step_sizes(cfg, np.arange(start, min(start + chunk, cap + 1)))
        cum = A + np.cumsum(a)
        hit = np.flatnonzero(cum >= A_target)
        if hit.size:
            n_sched = start + int(hit[0])
            break
        A = float(cum[-1])
        start += chunk

    if cfg.nu > 0:
        n_form = cfg.C_W_prime / math.sqrt(cfg.c1 * cfg.nu) * math.log(
            w_norm**2 / (2 * cfg.eps) + dual / (4 * cfg.K)
        )
    else:
        n_form = cfg.C_W_prime * math.sqrt(2 * cfg.K * w_norm**2 / cfg.eps**2 + dual / cfg.eps)
    return IterationBudget(n_sched, int(math.ceil(n_form)), A_target, D0)


@dataclass
class FeasibilityReport:
    T: int
    violations: dict[str, int]
    first_violation: dict[str, int | None]

    @property
    def passed(self) -> bool:
        return not any(self.violations.values())

    def to_dict(self) -> dict:
        return asdict(self) | {"passed": self.passed}


def step_size_feasibility(cfg: SolverConfig, T: int = 100_000, rtol: float = 1e-12) -> FeasibilityReport:
    """Enumerate the step-size conditions of the convergence-rate argument over ``t = 1..T``.

    ``dual_coupling`` and ``primal_curvature`` are the two conditions as
    stated; ``full_curvature`` keeps the unsimplified constant and
    ``coupled_rate`` is the per-step bound the schedule is built from.
    """
    t = np.arange(1, T + 1)
    a = step_sizes(cfg, t)
    A = np.cumsum(a)
    a_lag = np.concatenate([[0.0], a[:-1]])  # a_{t-1}
    A_lag = np.concatenate([[0.0], A[:-1]])  # A_{t-1}
    A_lag2 = np.concatenate([[0.0, 0.0], A[:-2]])[:T]  # A_{t-2}
    b, B, W, c1 = cfg.beta, cfg.B, cfg.W, cfg.c1
    curv_rhs = (1 + 0.5 * c1 * A) / 4

    checks = {
        "dual_coupling": (4 * math.sqrt(3) * cfg.C_W * b * B * W * a_lag, cfg.nu0 + cfg.nu * A_lag2),
        "primal_curvature": (cfg.C4 * a, curv_rhs),
        "full_curvature": ((24 * c1 + 6 * b**2 * B + 2160 * b**4 * B**2 / c1) * a, curv_rhs),
        "coupled_rate": (
            a,
            np.sqrt((cfg.nu0 + cfg.nu * A_lag) * (2 + c1 * A)) / (4 * math.sqrt(2) * cfg.C_W_prime),
        ),
    }
    violations, first = {}, {}
    for name, (lhs, rhs) in checks.items():
        bad = np.flatnonzero(lhs > rhs * (1 + rtol))
        violations[name] = int(bad.size)
        first[name] = int(t[bad[0]]) if bad.size else None
    return FeasibilityReport(T, violations, first)
