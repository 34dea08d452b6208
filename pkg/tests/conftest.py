import sys

import numpy as np
import pytest

from gdro.activations import relu
from gdro.data import GeneratorConfig, generate, truncate_labels


def unit_vector(d: int, norm: float = 1.0, seed: int = 0) -> np.ndarray:
    u = np.random.default_rng(seed).standard_normal(d)
    return norm * u / np.linalg.norm(u)


@pytest.fixture
def small_realizable():
    """Three Gaussian groups in d=4 with clean ReLU labels."""
    w = unit_vector(4, 0.5, seed=3)
    ds = generate(GeneratorConfig(K=3, d=4, W=2.0, seed=11), w, relu(), 300)
    return truncate_labels(ds, 2.0, 1.0, 1.0, 1e-3, 1.0), w


@pytest.fixture
def small_noisy():
    w = unit_vector(3, 0.5, seed=5)
    cfg = GeneratorConfig(K=3, d=3, noise="gaussian", sigma_noise=0.2, W=2.0, seed=4)
    ds = generate(cfg, w, relu(), 200)
    return truncate_labels(ds, 2.0, 1.0, 1.0, 1e-3, 1.0), w


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
