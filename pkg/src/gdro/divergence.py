"""KL and chi-squared penalties on the simplex, their Bregman divergences,
and the regularized argmax used by the dual update.

Simplex vectors are plain 1-d float arrays.  ``kind="none"`` has a zero
penalty but still uses KL as the Bregman base of the dual step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, rel_entr

KINDS = ("kl", "chi2", "none")
ANCHOR_FLOOR = 1e-300
SUM_TOL = 1e-12


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class DivergencePenalty:
    kind: str
    K: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown divergence {self.kind!r}; expected one of {KINDS}")
        if self.K < 1:
            raise InvalidInputError("K must be a positive integer")

    @property
    def bregman_kind(self) -> str:
        return "kl" if self.kind == "none" else self.kind

    @property
    def uniform(self) -> np.ndarray:
        return np.full(self.K, 1.0 / self.K)


def to_simplex(v) -> np.ndarray:
    """Clamp negatives to zero and renormalize."""
    v = np.maximum(np.asarray(v, dtype=float), 0.0)
    total = v.sum()
    if not np.isfinite(total) or total <= 0:
        raise InvalidInputError("vector has no positive mass")
    return v / total


def is_simplex(v, tol: float = SUM_TOL) -> bool:
    v = np.asarray(v, dtype=float)
    return bool(np.all(v >= 0) and abs(v.sum() - 1.0) <= tol)


def penalty_value(p: DivergencePenalty, lam) -> float:
    lam = np.asarray(lam, dtype=float)
    if p.kind == "kl":
        return float(np.sum(rel_entr(lam, 1.0 / p.K)))
    if p.kind == "chi2":
        return float(p.K * np.sum((lam - 1.0 / p.K) ** 2))
    return 0.0


def bregman(p: DivergencePenalty, a, b) -> float:
    """Bregman divergence of the penalty, D(a, b); +inf for KL when supp(a) is not in supp(b)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if p.bregman_kind == "kl":
        return float(np.sum(rel_entr(a, b)))
    return float(p.K * np.sum((a - b) ** 2))


def project_simplex(v, tol: float = SUM_TOL, max_iter: int = 200) -> np.ndarray:
    """Euclidean projection onto the simplex by bisection on the KKT multiplier.

    Bisection runs until the sum residual drops below ``tol``; the support it
    identifies is then used to recompute the multiplier exactly.
    """
    v = np.asarray(v, dtype=float)
    lo, hi = v.min() - 1.0, v.max()
    tau = 0.5 * (lo + hi)
    for _ in range(max_iter):
        tau = 0.5 * (lo + hi)
        support = v > tau
        resid = (v[support] - tau).sum() - 1.0
        if abs(resid) < tol:
            break
        # the residual is linear in tau while the support is fixed, so try
        # the exact root for the current support before halving the bracket
        exact = (v[support].sum() - 1.0) / support.sum()
        if abs(np.maximum(v - exact, 0.0).sum() - 1.0) < tol:
            tau = exact
            break
        if resid > 0:
            lo = tau
        else:
            hi = tau
    support = v > tau
    if support.any():
        tau = (v[support].sum() - 1.0) / support.sum()
    out = np.maximum(v - tau, 0.0)
    return out / out.sum()


def _check_scores(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("scores must be finite")
    return scores


def _kl_argmax(scores: np.ndarray, s: float, c: float, nu: float, K: int, anchor: np.ndarray) -> np.ndarray:
    # geometric interpolation of anchor and uniform, tilted by the scores
    denom = c + s * nu
    logits = (s * scores + c * np.log(np.maximum(anchor, ANCHOR_FLOOR)) - s * nu * math.log(K)) / denom
    lam = np.exp(logits - logits.max())
    return lam / lam.sum()


def regularized_argmax(
    p: DivergencePenalty,
    scores,
    step: float,
    nu: float,
    breg_weight: float,
    anchor,
) -> np.ndarray:
    """Maximize ``step*(<lam, scores> - nu*d(lam, u)) - breg_weight*D(lam, anchor)`` over the simplex."""
    scores = _check_scores(scores)
    anchor = np.asarray(anchor, dtype=float)
    if step == 0:
        return anchor.copy()
    if breg_weight <= 0:
        raise InvalidInputError("breg_weight must be positive")
    s, c = float(step), float(breg_weight)
    nu = 0.0 if p.kind == "none" else float(nu)

    if p.bregman_kind == "kl":
        return _kl_argmax(scores, s, c, nu, p.K, anchor)

    denom = s * nu + c
    center = (s * nu / p.K + c * anchor) / denom + s * scores / (2.0 * p.K * denom)
    return project_simplex(center)


def regularized_objective(p: DivergencePenalty, lam, scores, step, nu, breg_weight, anchor) -> float:
    nu = 0.0 if p.kind == "none" else nu
    lam = np.asarray(lam, dtype=float)
    return float(
        step * (lam @ np.asarray(scores, dtype=float) - nu * penalty_value(p, lam))
        - breg_weight * bregman(p, lam, anchor)
    )


def worst_case_weights(p: DivergencePenalty, losses, nu: float) -> tuple[np.ndarray, float]:
    """Worst-case group weights and the attained penalized risk.

    With no penalty the maximizer is the indicator of the largest loss,
    ties going to the lowest index.
    """
    losses = np.asarray(losses, dtype=float)
    K = losses.size
    if nu == 0 or p.kind == "none":
        lam = np.zeros(K)
        lam[int(np.argmax(losses))] = 1.0
        return lam, float(losses.max())
    if p.kind == "kl":
        z = losses / nu
        lam = np.exp(z - z.max())
        lam /= lam.sum()
        return lam, float(nu * (logsumexp(z) - np.log(K)))
    lam = project_simplex(1.0 / K + losses / (2.0 * K * nu))
    return lam, float(lam @ losses - nu * K * np.sum((lam - 1.0 / K) ** 2))


def penalized_value(p: DivergencePenalty, lam, losses, nu: float) -> float:
    """``<lam, losses> - nu * d(lam, u)``; the coupled objective at a fixed primal point."""
    lam = np.asarray(lam, dtype=float)
    return float(lam @ np.asarray(losses, dtype=float) - nu * penalty_value(p, lam))


def tv_squared_bound_check(a, b, p: DivergencePenalty) -> bool:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lhs = np.abs(a - b).sum() ** 2
    return bool(lhs <= 2.0 * bregman(p, a, b) + 1e-14)
