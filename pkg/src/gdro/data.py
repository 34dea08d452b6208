"""Synthetic K-group datasets, label corruption and truncation, assumption
certificates, and the on-disk format.

File format: the first line is a JSON object holding the metadata (plus K
and d), the second line is the CSV header ``group_id,x_1..x_d,y`` and every
following line is one sample written with 17 significant digits, which
round-trips IEEE doubles exactly.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from gdro.activations import ActivationSpec

MARGINALS = ("gaussian", "shifted_gaussian", "ternary")
NOISE_MODELS = ("none", "gaussian", "adversarial")


class DatasetError(ValueError):
    """Malformed dataset file or a dataset violating its invariants."""


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    K: int
    d: int
    marginal: str = "gaussian"
    shifts: list[list[float]] | None = None
    noise: str = "none"
    sigma_noise: float = 0.0
    eta_corrupt: float = 0.0
    corruption_magnitude: float | None = None
    B: float = 1.0
    gamma: float = 0.5
    zeta: float = 0.3
    W: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.d < 1:
            raise InvalidParameterError("K and d must be positive")
        if self.marginal not in MARGINALS:
            raise InvalidParameterError(f"marginal must be one of {MARGINALS}")
        if self.noise not in NOISE_MODELS:
            raise InvalidParameterError(f"noise must be one of {NOISE_MODELS}")
        if not 0.0 <= self.eta_corrupt < 1.0:
            raise InvalidParameterError("eta_corrupt must lie in [0, 1)")
        if self.sigma_noise < 0:
            raise InvalidParameterError("sigma_noise must be non-negative")
        if not (0 < self.gamma <= 1 and 0 < self.zeta <= 1):
            raise InvalidParameterError("gamma and zeta must lie in (0, 1]")
        if self.shifts is not None:
            s = np.asarray(self.shifts, dtype=float)
            if s.shape != (self.K, self.d):
                raise InvalidParameterError(f"shifts must have shape ({self.K}, {self.d})")
        if self.noise == "adversarial" and self.corruption_magnitude is None:
            raise InvalidParameterError("adversarial noise needs corruption_magnitude")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


@dataclass
class GroupDataset:
    xs: list[np.ndarray]
    ys: list[np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xs = [np.ascontiguousarray(x, dtype=float) for x in self.xs]
        self.ys = [np.ascontiguousarray(y, dtype=float) for y in self.ys]
        self.validate()

    def validate(self) -> None:
        if not self.xs or len(self.xs) != len(self.ys):
            raise DatasetError("dataset needs at least one group and matching x/y lists")
        d = self.xs[0].shape[1] if self.xs[0].ndim == 2 else None
        for i, (x, y) in enumerate(zip(self.xs, self.ys)):
            if x.ndim != 2 or x.shape[1] != d:
                raise DatasetError(f"group {i}: x must have shape (n, {d})")
            if x.shape[0] == 0:
                raise DatasetError(f"group {i} is empty")
            if y.shape != (x.shape[0],):
                raise DatasetError(f"group {i}: label count does not match sample count")
        M = self.metadata.get("truncation_M")
        if M is not None and max(np.abs(y).max() for y in self.ys) > M:
            raise DatasetError("labels exceed the recorded truncation bound")

    @property
    def K(self) -> int:
        return len(self.xs)

    @property
    def d(self) -> int:
        return self.xs[0].shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.array([x.shape[0] for x in self.xs])

    @property
    def w_star(self) -> np.ndarray | None:
        w = self.metadata.get("w_star")
        return None if w is None else np.asarray(w, dtype=float)

    @property
    def truncation_M(self) -> float | None:
        return self.metadata.get("truncation_M")

    @cached_property
    def packed(self) -> "Packed":
        return Packed.from_groups(self.xs, self.ys)

    def replace_labels(self, ys: list[np.ndarray], **meta) -> "GroupDataset":
        return GroupDataset([x.copy() for x in self.xs], ys, {**self.metadata, **meta})

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroupDataset) or self.K != other.K:
            return False
        return (
            self.metadata == other.metadata
            and all(np.array_equal(a, b) for a, b in zip(self.xs, other.xs))
            and all(np.array_equal(a, b) for a, b in zip(self.ys, other.ys))
        )


@dataclass(frozen=True)
class Packed:
    """All groups stacked into one array with per-group offsets."""

    X: np.ndarray
    XT: np.ndarray
    y: np.ndarray
    starts: np.ndarray
    counts: np.ndarray
    group_index: np.ndarray

    @classmethod
    def from_groups(cls, xs, ys) -> "Packed":
        counts = np.array([x.shape[0] for x in xs])
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        X = np.ascontiguousarray(np.concatenate(xs))
        return cls(
            X=X,
            XT=np.ascontiguousarray(X.T),
            y=np.concatenate(ys),
            starts=starts,
            counts=counts,
            group_index=np.repeat(np.arange(len(xs)), counts),
        )

    def group_mean(self, v: np.ndarray) -> np.ndarray:
        return np.add.reduceat(v, self.starts, axis=0) / (
            self.counts if v.ndim == 1 else self.counts[:, None]
        )


def label_bound(W: float, B: float, beta: float, eps: float, C_M: float) -> float:
    """Truncation level ``C_M * W * B * beta * log(beta * B * W / eps)``."""
    if min(W, B, beta, eps, C_M) <= 0:
        raise InvalidParameterError("truncation parameters must be positive")
    ratio = beta * B * W / eps
    if ratio <= 1:
        raise InvalidParameterError("beta*B*W/eps must exceed 1 for a positive truncation level")
    return C_M * W * B * beta * math.log(ratio)


def _corrupted_count(eta: float, n: int) -> int:
    return int(math.floor(eta * n + 0.5))


def generate(cfg: GeneratorConfig, w_star, activation: ActivationSpec, n_per_group: int) -> GroupDataset:
    """Draw ``n_per_group`` labeled samples per group with labels from the planted neuron."""
    w_star = np.asarray(w_star, dtype=float)
    if w_star.shape != (cfg.d,):
        raise InvalidParameterError(f"w_star must have shape ({cfg.d},)")
    if np.linalg.norm(w_star) > cfg.W:
        raise InvalidParameterError("||w_star|| exceeds the parameter radius W")
    if n_per_group < 1:
        raise InvalidParameterError("n_per_group must be at least 1")

    rng = np.random.default_rng(cfg.seed)
    shifts = np.zeros((cfg.K, cfg.d)) if cfg.shifts is None else np.asarray(cfg.shifts, dtype=float)
    n_bad = _corrupted_count(cfg.eta_corrupt, n_per_group) if cfg.noise == "adversarial" else 0

    xs, ys = [], []
    for i in range(cfg.K):
        if cfg.marginal == "ternary":
            x = rng.integers(-1, 2, size=(n_per_group, cfg.d)).astype(float)
        else:
            x = rng.standard_normal((n_per_group, cfg.d))
            if cfg.marginal == "shifted_gaussian":
                x += shifts[i]
        clean = activation.value(x @ w_star)
        y = clean.copy()
        if cfg.noise == "gaussian":
            y += cfg.sigma_noise * rng.standard_normal(n_per_group)
        elif cfg.noise == "adversarial" and n_bad:
            idx = rng.permutation(n_per_group)[:n_bad]
            # opposite sign of the clean label at full magnitude; zero counts as positive
            y[idx] = np.where(clean[idx] >= 0, -1.0, 1.0) * cfg.corruption_magnitude
        xs.append(x)
        ys.append(y)

    meta = {
        "generator": cfg.to_dict(),
        "seed": cfg.seed,
        "activation": activation.name,
        "n_per_group": n_per_group,
        "w_star": w_star.tolist(),
        "eta_corrupt": cfg.eta_corrupt if cfg.noise == "adversarial" else 0.0,
        "n_corrupted_per_group": n_bad,
        "truncation_M": None,
    }
    return GroupDataset(xs, ys, meta)


def truncate_labels(ds: GroupDataset, W: float, B: float, beta: float, eps: float, C_M: float) -> GroupDataset:
    """Clip every label to ``[-M, M]``."""
    M = label_bound(W, B, beta, eps, C_M)
    ys = [np.sign(y) * np.minimum(np.abs(y), M) for y in ds.ys]
    return ds.replace_labels(ys, truncation_M=M)


@dataclass
class MarginReport:
    gamma: float
    zeta_hat: float
    per_group: list[float]
    empty_region: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _unit_directions(d: int, n: int, seed) -> np.ndarray:
    u = np.random.default_rng(seed).standard_normal((n, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def margin_certificate(ds: GroupDataset, gamma: float, n_directions: int, seed=0) -> MarginReport:
    """Sampled lower bound on the smallest eigenvalue of ``E[x x^T 1{u.x >= gamma}]``.

    This samples directions; it is evidence, not a proof.
    """
    if n_directions < 1:
        raise InvalidParameterError("n_directions must be at least 1")
    dirs = _unit_directions(ds.d, n_directions, seed)
    empty = False
    per_group = []
    for x in ds.xs:
        proj = x @ dirs.T
        worst = np.inf
        for j in range(n_directions):
            mask = proj[:, j] >= gamma
            if not mask.any():
                empty = True
                worst = 0.0
                continue
            xm = x[mask]
            m = xm.T @ xm / x.shape[0]
            worst = min(worst, float(np.linalg.eigvalsh(m)[0]))
        per_group.append(max(worst, 0.0))
    if empty:
        warnings.warn("margin region empty for at least one direction", RuntimeWarning, stacklevel=2)
    return MarginReport(gamma, min(per_group), per_group, empty)


@dataclass
class TailReport:
    radii: tuple[float, ...]
    B_hat: float
    per_group: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def tail_certificate(ds: GroupDataset, n_directions: int, seed=0, radii=(1.0, 2.0, 4.0, 8.0)) -> TailReport:
    """Smallest B with ``P(|u.x| >= r) <= exp(-r/B)`` at every radius and sampled direction."""
    if n_directions < 1:
        raise InvalidParameterError("n_directions must be at least 1")
    dirs = _unit_directions(ds.d, n_directions, seed)
    r = np.asarray(radii, dtype=float)
    per_group = []
    for x in ds.xs:
        proj = np.abs(x @ dirs.T)
        p = (proj[:, :, None] >= r).mean(axis=0)
        with np.errstate(divide="ignore"):
            need = np.where(p >= 1.0, np.inf, np.where(p > 0, r / -np.log(np.where(p > 0, p, 0.5)), 0.0))
        per_group.append(float(need.max()))
    return TailReport(tuple(radii), max(per_group), per_group)


def sharpness_c0(gamma: float, zeta: float, alpha: float, B: float) -> float:
    """Population sharpness constant ``gamma*zeta*alpha / (6 B log(20 B / zeta^2))``."""
    return gamma * zeta * alpha / (6.0 * B * math.log(20.0 * B / zeta**2))


def sharpness_c1(c0: float, B: float) -> float:
    return c0**2 / (24.0 * B)


def sample_size_hint(K: int, W: float, d: int, eps: float, delta: float) -> int:
    """Order-of-magnitude total sample size ``K W^4 d log(1/delta) / eps^2``.

    Constants and log factors hidden in the O-tilde bound are dropped, so
    this is a heuristic scale, not a guarantee.
    """
    return int(math.ceil(K * W**4 * d * math.log(1.0 / delta) / eps**2))


def save(ds: GroupDataset, path) -> None:
    header = {"K": ds.K, "d": ds.d, "metadata": ds.metadata}
    cols = ["group_id"] + [f"x_{j + 1}" for j in range(ds.d)] + ["y"]
    lines = [json.dumps(header, sort_keys=True), ",".join(cols)]
    for g, (x, y) in enumerate(zip(ds.xs, ds.ys)):
        body = np.column_stack([x, y])
        for row in body:
            lines.append(str(g) + "," + ",".join(format(v, ".17g") for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> GroupDataset:
    text = Path(path).read_text().splitlines()
    if len(text) < 2:
        raise DatasetError(f"{path}: missing header lines")
    try:
        header = json.loads(text[0])
        K, d, meta = int(header["K"]), int(header["d"]), header["metadata"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: line 1: bad JSON header ({exc})") from exc
    expected = ["group_id"] + [f"x_{j + 1}" for j in range(d)] + ["y"]
    if text[1].split(",") != expected:
        raise DatasetError(f"{path}: line 2: column header does not match d={d}")

    rows: list[list[list[float]]] = [[] for _ in range(K)]
    for lineno, line in enumerate(text[2:], start=3):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != d + 2:
            raise DatasetError(f"{path}: line {lineno}: expected {d + 2} fields, found {len(parts)}")
        try:
            g = int(parts[0])
            vals = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
        if not 0 <= g < K:
            raise DatasetError(f"{path}: line {lineno}: group_id {g} outside [0, {K})")
        rows[g].append(vals)

    for g, r in enumerate(rows):
        if not r:
            raise DatasetError(f"{path}: group {g} is empty")
    arrs = [np.array(r) for r in rows]
    return GroupDataset([a[:, :d] for a in arrs], [a[:, d] for a in arrs], meta)
