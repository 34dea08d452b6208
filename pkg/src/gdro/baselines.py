"""Comparison methods and a toy multi-domain streaming harness.

The reweighters act on a vector ``diff`` of per-domain excess losses.  The
stream simulator trains one scalar least-squares model per domain with a
batch drawn from the current domain weights, so a persistently hard domain
benefits directly from being upweighted.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from gdro.activations import ActivationSpec
from gdro.data import GroupDataset
from gdro.solver import averaged_gradient, project_ball

REWEIGHTERS = ("pd-kl", "exp-ascent", "uniform")


@dataclass(frozen=True)
class ReweighterConfig:
    eta: float
    extrapolation_factor: float = 0.0
    mix_c: float = 0.0
    floor_eps: float = 1e-6

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.extrapolation_factor < 0:
            raise ValueError("extrapolation_factor must be non-negative")
        if not 0.0 <= self.mix_c < 1.0:
            raise ValueError("mix_c must lie in [0, 1)")
        if self.floor_eps < 0:
            raise ValueError("floor_eps must be non-negative")


@dataclass
class StreamState:
    weights: np.ndarray
    prev_weights: np.ndarray
    step: int = 0

    @classmethod
    def uniform(cls, K: int) -> "StreamState":
        u = np.full(K, 1.0 / K)
        return cls(u, u.copy())

    def advance(self, new: np.ndarray) -> np.ndarray:
        self.prev_weights, self.weights = self.weights, new
        self.step += 1
        return new


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def pdkl_update(cfg: ReweighterConfig, state: StreamState, diff, strict: bool = False) -> np.ndarray:
    """Log-space ascent, softmax, extrapolation and uniform mixing.

    The extrapolated vector can have negative entries.  By default the
    mixed result is clamped at zero and renormalized; ``strict=True``
    returns it unchanged, which may leave the simplex; the next ascent step
    then starts from the clamped weights.  Strict mode multiplies any
    rounding error in the total mass by ``-extrapolation_factor`` per step,
    so it is only stable for factors below one.
    """
    diff = np.asarray(diff, dtype=float)
    if not np.all(np.isfinite(diff)):
        raise ValueError("diff must be finite")
    lam = state.weights
    new = _softmax(np.log(np.maximum(lam, 0.0) + cfg.floor_eps) + cfg.eta * diff)
    extra = new + cfg.extrapolation_factor * (new - lam)
    out = (1.0 - cfg.mix_c) * extra + cfg.mix_c / lam.size
    if not strict:
        out = np.maximum(out, 0.0)
        out /= out.sum()
    return state.advance(out)


def exp_ascent_update(eta: float, state: StreamState, diff) -> np.ndarray:
    """Multiplicative weights: ``lam_i`` proportional to ``lam_i * exp(eta * diff_i)``."""
    diff = np.asarray(diff, dtype=float)
    if not np.all(np.isfinite(diff)):
        raise ValueError("diff must be finite")
    new = state.weights * np.exp(eta * (diff - diff.max()))
    return state.advance(new / new.sum())


def uniform_sgd(
    ds: GroupDataset, activation: ActivationSpec, step: float, n_iters: int, W: float, beta: float | None = None
) -> np.ndarray:
    """Projected surrogate-gradient descent on the uniform group mixture, from ``w = 0``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    beta = activation.beta if beta is None else beta
    weights = np.full(ds.K, 1.0 / ds.K)
    w = np.zeros(ds.d)
    if step == 0:
        return w
    for _ in range(n_iters):
        w = project_ball(w - step * averaged_gradient(ds, activation, w, weights, beta), W)
    return w


@dataclass(frozen=True)
class StreamConfig:
    """Toy streaming setup: ``K`` scalar regression domains of varied conditioning.

    Domain ``i`` draws ``x ~ N(0, 1/kappa_i)`` and ``y = theta*_i x + sigma xi``
    with ``kappa_i`` log-uniform on ``kappa_range``; its loss is the
    population squared error ``0.5 ((theta_i - theta*_i)^2 / kappa_i + sigma^2)``.
    ``identical_domains`` gives every domain the first domain's parameters.
    """

    K: int = 8
    horizon: int = 5000
    batch_size: int = 64
    lr: float = 0.02
    sigma: float = 0.01
    kappa_range: tuple[float, float] = (1.0, 100.0)
    target_range: tuple[float, float] = (1.0, 2.0)
    ema_decay: float = 0.9
    identical_domains: bool = False
    reweighter: ReweighterConfig = field(default_factory=lambda: ReweighterConfig(eta=1.0))
    exp_eta: float | None = None

    def __post_init__(self):
        if self.K < 1 or self.horizon < 1 or self.batch_size < 1:
            raise ValueError("K, horizon and batch_size must be positive")
        if self.lr <= 0 or self.sigma < 0:
            raise ValueError("lr must be positive and sigma non-negative")
        lo, hi = self.kappa_range
        if not 1.0 <= lo <= hi:
            raise ValueError("kappa_range must satisfy 1 <= lo <= hi")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if isinstance(self.reweighter, dict):
            object.__setattr__(self, "reweighter", ReweighterConfig(**self.reweighter))
        object.__setattr__(self, "kappa_range", tuple(self.kappa_range))
        object.__setattr__(self, "target_range", tuple(self.target_range))

    @property
    def exp_ascent_eta(self) -> float:
        return self.reweighter.eta if self.exp_eta is None else self.exp_eta

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StreamConfig":
        return cls(**d)


@dataclass
class StreamTrace:
    worst_domain_loss: np.ndarray
    mean_loss: np.ndarray
    weights: np.ndarray

    @property
    def step(self) -> np.ndarray:
        return np.arange(1, len(self.worst_domain_loss) + 1)

    def header(self) -> list[str]:
        return ["step", "worst_domain_loss", "mean_loss"] + [f"w_{i + 1}" for i in range(self.weights.shape[1])]

    def rows(self):
        for t, wl, ml, w in zip(self.step, self.worst_domain_loss, self.mean_loss, self.weights):
            yield [int(t), repr(float(wl)), repr(float(ml))] + [repr(float(v)) for v in w]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            writer.writerows(self.rows())


def _domains(cfg: StreamConfig, rng: np.random.Generator):
    lo, hi = cfg.kappa_range
    kappa = np.exp(rng.uniform(math.log(lo), math.log(hi), cfg.K))
    target = rng.uniform(*cfg.target_range, cfg.K) * rng.choice([-1.0, 1.0], cfg.K)
    if cfg.identical_domains:
        kappa[:] = kappa[0]
        target[:] = target[0]
    return 1.0 / kappa, target


def simulate_stream(cfg: StreamConfig, reweighter: str, seed: int = 0, strict: bool = False) -> StreamTrace:
    """Train every domain model with weighted minibatches and reweight after each step.

    The domain constants and the minibatch noise come from separate streams
    of ``seed``, so all reweighters see the same domains for a given seed.
    """
    if reweighter not in REWEIGHTERS:
        raise ValueError(f"unknown reweighter {reweighter!r}; expected one of {REWEIGHTERS}")
    dom_rng, rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    h, target = _domains(cfg, dom_rng)
    K, b = cfg.K, cfg.batch_size
    theta = np.zeros(K)
    noise_var = 0.5 * cfg.sigma**2

    def population_loss(th):
        return 0.5 * h * (th - target) ** 2 + noise_var

    state = StreamState.uniform(K)
    ema = population_loss(theta)
    worst = np.empty(cfg.horizon)
    mean = np.empty(cfg.horizon)
    weights = np.empty((cfg.horizon, K))
    scale = cfg.lr * K / b
    sqrt_h = np.sqrt(h)

    for t in range(cfg.horizon):
        counts = rng.multinomial(b, to_proportions(state.weights))
        dom = np.repeat(np.arange(K), counts)
        x = sqrt_h[dom] * rng.standard_normal(b)
        y = target[dom] * x + cfg.sigma * rng.standard_normal(b)
        grad = np.bincount(dom, weights=(theta[dom] * x - y) * x, minlength=K)
        theta = theta - scale * grad

        loss = population_loss(theta)
        diff = loss - ema
        ema = cfg.ema_decay * ema + (1 - cfg.ema_decay) * loss
        if reweighter == "pd-kl":
            pdkl_update(cfg.reweighter, state, diff, strict=strict)
        elif reweighter == "exp-ascent":
            exp_ascent_update(cfg.exp_ascent_eta, state, diff)
        else:
            state.advance(state.weights)
        worst[t] = loss.max()
        mean[t] = loss.mean()
        weights[t] = state.weights
    return StreamTrace(worst, mean, weights)


def to_proportions(weights: np.ndarray) -> np.ndarray:
    """Sampling proportions from possibly unnormalized weights (strict-mode output)."""
    p = np.maximum(weights, 0.0)
    total = p.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError("weights have no positive mass")
    return p / total


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GDRO_THREADS", "1")))
    except ValueError:
        return 1


def simulate_seeds(cfg: StreamConfig, reweighter: str, seeds, strict: bool = False) -> list[StreamTrace]:
    """Run one simulation per seed; ``GDRO_THREADS`` caps the worker count."""
    seeds = list(seeds)
    n = min(worker_count(), len(seeds))
    if n <= 1:
        return [simulate_stream(cfg, reweighter, s, strict) for s in seeds]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda s: simulate_stream(cfg, reweighter, s, strict), seeds))
