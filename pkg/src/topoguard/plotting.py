"""Report figures rendered to files (non-interactive backend)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_SIZE = (6.0, 6.0 * (math.sqrt(5) - 1.0) / 2.0)

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})


def _eps_label(e) -> str:
    return "inf" if (isinstance(e, str) or math.isinf(e)) else f"{e:g}"


def plot_sweep(rows, path) -> None:
    """Rank-1 and mAP (mean +- std over seeds) per privacy level."""
    labels = [_eps_label(r.epsilon) for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.errorbar(x, [r.rank1_mean for r in rows], yerr=[r.rank1_std for r in rows],
                marker="o", capsize=3, label="Rank-1")
    ax.errorbar(x, [r.mAP_mean for r in rows], yerr=[r.mAP_std for r in rows],
                marker="s", capsize=3, label="mAP")
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_xlabel("privacy budget per release (epsilon)")
    ax.set_ylabel("score")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False)
    fig.savefig(path)
    plt.close(fig)


def plot_margin_dynamics(history, path, highlight=()) -> None:
    """Per-identity adaptive margin over epochs; highlighted identities drawn in color."""
    epochs = [h["epoch"] for h in history if h["gamma"]]
    idents = sorted({k for h in history for k in h["gamma"]})
    highlight = set(int(i) for i in highlight)
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    for ident in idents:
        ys = [h["gamma"].get(ident, np.nan) for h in history if h["gamma"]]
        hot = ident in highlight
        ax.plot(epochs, ys, color="C3" if hot else "0.6", lw=1.4 if hot else 0.8,
                alpha=1.0 if hot else 0.6, zorder=3 if hot else 2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("adaptive margin")
    fig.savefig(path)
    plt.close(fig)


def plot_compactness(history, path, window: int = 5) -> None:
    epochs = np.array([h["epoch"] for h in history])
    Q = np.array([h["Q"] for h in history])
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.plot(epochs, Q, marker=".", lw=0.8, label="Q")
    if Q.size >= window:
        ma = np.convolve(Q, np.ones(window) / window, mode="valid")
        ax.plot(epochs[window - 1:], ma, lw=1.6, label=f"{window}-epoch mean")
    ax.set_xlabel("epoch")
    ax.set_ylabel("compactness Q (lower is tighter)")
    ax.legend(frameon=False)
    fig.savefig(path)
    plt.close(fig)
