"""Convex, non-decreasing activations with linear growth on the positive axis.

An activation is described by two slopes: ``alpha`` bounds its growth from
below on ``t >= 0`` and ``beta`` is its global Lipschitz constant.  The
validator checks these conditions on a user grid, which is how custom
activations without a closed form get certified.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable

import numpy as np

ArrayFn = Callable[[np.ndarray], np.ndarray]


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationSpec:
    name: str
    alpha: float
    beta: float
    value: ArrayFn = field(repr=False)
    subderivative: ArrayFn = field(repr=False)

    def __call__(self, t):
        return self.value(t)


def relu() -> ActivationSpec:
    def value(t):
        return np.maximum(t, 0.0)

    def subderivative(t):
        # left limit at the kink
        return (np.asarray(t) > 0).astype(float)

    return ActivationSpec("relu", 1.0, 1.0, value, subderivative)


def leaky_relu(slope: float) -> ActivationSpec:
    if not 0.0 < slope < 1.0:
        raise InvalidParameterError(f"leaky_relu slope must lie in (0, 1), got {slope}")

    def value(t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= 0, t, slope * t)

    def subderivative(t):
        return np.where(np.asarray(t) > 0, 1.0, slope)

    # growth on t >= 0 has slope 1, so alpha = 1
    return ActivationSpec(f"leaky_relu:{slope!r}", 1.0, 1.0, value, subderivative)


def parse_activation(name: str) -> ActivationSpec:
    """Build an activation from ``"relu"`` or ``"leaky_relu:<slope>"``."""
    if name == "relu":
        return relu()
    if name.startswith("leaky_relu:"):
        try:
            slope = float(name.split(":", 1)[1])
        except ValueError as exc:
            raise InvalidParameterError(f"bad leaky_relu slope in {name!r}") from exc
        return leaky_relu(slope)
    raise InvalidParameterError(f"unknown activation {name!r}")


@dataclass
class ConditionResult:
    passed: bool
    violation: tuple[float, ...] | None = None

    def to_dict(self) -> dict:
        return {"passed": self.passed, "violation": self.violation}


@dataclass
class ActivationReport:
    zero_at_origin: ConditionResult
    non_decreasing: ConditionResult
    lipschitz: ConditionResult
    unbounded_growth: ConditionResult
    convex: ConditionResult
    subgradient: ConditionResult
    subderivative_range: ConditionResult

    @property
    def passed(self) -> bool:
        return all(r.passed for r in vars(self).values())

    def to_dict(self) -> dict:
        return {k: v.to_dict() for k, v in vars(self).items()} | {"passed": self.passed}


def _first_pair(mask: np.ndarray, a: np.ndarray, b: np.ndarray, *extra) -> ConditionResult:
    bad = np.flatnonzero(mask)
    if bad.size == 0:
        return ConditionResult(True)
    i = bad[0]
    return ConditionResult(False, tuple(float(v[i]) for v in (a, b, *extra)))


def validate_activation(spec: ActivationSpec, grid, tol: float = 1e-12) -> ActivationReport:
    """Check the activation conditions over all pairs drawn from ``grid``.

    Failures are reported with the first violating pair, never raised.
    """
    grid = np.unique(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise InvalidParameterError("grid must be non-empty")
    if tol <= 0:
        raise InvalidParameterError("tol must be positive")

    f0 = float(np.asarray(spec.value(np.array([0.0])))[0])
    zero = ConditionResult(abs(f0) <= tol, None if abs(f0) <= tol else (0.0, f0))

    pairs = np.array(list(combinations(range(grid.size), 2)), dtype=int).reshape(-1, 2)
    # grid is sorted, so hi >= lo for every pair
    lo, hi = grid[pairs[:, 0]], grid[pairs[:, 1]]
    f_lo, f_hi = spec.value(lo), spec.value(hi)
    df, dt = f_hi - f_lo, hi - lo

    mono = _first_pair(df < -tol, hi, lo)
    lip = _first_pair(np.abs(df) > spec.beta * dt + tol, hi, lo)
    nonneg = lo >= 0
    growth = _first_pair(nonneg & (df < spec.alpha * dt - tol), hi, lo)

    # convexity at the midpoint and at the 1/4 point of every pair
    conv_bad = np.zeros(len(lo), dtype=bool)
    for lam in (0.25, 0.5):
        mid = lam * lo + (1 - lam) * hi
        conv_bad |= spec.value(mid) > lam * f_lo + (1 - lam) * f_hi + tol
    conv = _first_pair(conv_bad, lo, hi)

    # subgradient inequality f(s) >= f(t) + g(t)(s - t), both orderings
    s = np.concatenate([lo, hi])
    t = np.concatenate([hi, lo])
    sub_bad = spec.value(s) < spec.value(t) + spec.subderivative(t) * (s - t) - tol
    subg = _first_pair(sub_bad, s, t)

    g = spec.subderivative(grid)
    rng_bad = (g < -tol) | (g > spec.beta + tol)
    subr = _first_pair(rng_bad, grid, g)

    return ActivationReport(zero, mono, lip, growth, conv, subg, subr)
