"""Static figures for solver and stream traces (written to files, never shown)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _floor_positive(v: np.ndarray) -> np.ndarray:
    # log axes cannot show exact zeros
    return np.maximum(v, np.finfo(float).tiny)


def _thin(n: int, max_points: int = 4000) -> np.ndarray:
    return np.unique(np.linspace(0, n - 1, min(n, max_points)).astype(int))


def plot_solver_trace(columns: dict[str, np.ndarray], path, title: str = "") -> None:
    """Group losses, group weights and squared distance against the iteration index."""
    t = columns["t"]
    idx = _thin(len(t))
    loss_keys = sorted((k for k in columns if k.startswith("loss_")), key=lambda k: int(k.split("_")[1]))
    lam_keys = sorted((k for k in columns if k.startswith("lambda_")), key=lambda k: int(k.split("_")[1]))
    dist = columns.get("dist_sq_to_wstar")
    has_dist = dist is not None and np.all(np.isfinite(dist))

    n_panels = 3 if has_dist else 2
    fig, axes = plt.subplots(1, n_panels, figsize=(5 * n_panels, 3.8))
    for k in loss_keys:
        axes[0].plot(t[idx], _floor_positive(columns[k][idx]), lw=1, label=k)
    axes[0].set_yscale("log")
    axes[0].set_xscale("log")
    axes[0].set_title("group losses")
    axes[0].set_xlabel("iteration")
    for k in lam_keys:
        axes[1].plot(t[idx], columns[k][idx], lw=1, label=k)
    axes[1].set_xscale("log")
    axes[1].set_title("group weights")
    axes[1].set_xlabel("iteration")
    if len(lam_keys) <= 8:
        axes[1].legend(fontsize=7)
    if has_dist:
        axes[2].plot(t[idx], _floor_positive(dist[idx]), color="k", lw=1)
        axes[2].set_xscale("log")
        axes[2].set_yscale("log")
        axes[2].set_title("squared distance to w*")
        axes[2].set_xlabel("iteration")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_stream_comparison(curves: dict[str, dict[str, np.ndarray]], path, title: str = "") -> None:
    """Overlay worst-domain loss curves, one per reweighter."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, cols in curves.items():
        idx = _thin(len(cols["step"]))
        ax.plot(cols["step"][idx], _floor_positive(cols["worst_domain_loss"][idx]), lw=1.2, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("worst-domain loss (median over seeds)")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
