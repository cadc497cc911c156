"""Figure rendering for the report commands; files land next to the CSVs."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TERTILE_COLORS = {"low": "#2b83ba", "medium": "#fdae61", "high": "#d7191c"}
# keep PNGs byte-stable across runs
_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def _finish(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_survival(report, path, horizon: float = 10.0):
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for g, curve in report.curves.items():
        t = np.r_[0.0, curve.times]
        s = np.r_[1.0, curve.survival]
        ax.step(t, s, where="post", color=TERTILE_COLORS.get(g), label=f"{g} (n={report.group_sizes[g]})")
    ax.set_xlim(0, horizon)
    ax.set_xlabel("Years since ECG")
    ax.set_ylabel("Disease-free survival")
    ax.set_title(report.summary, fontsize=9)
    ax.legend(frameon=False, fontsize=8)
    ax.grid(color="0.85", linewidth=0.5)
    return _finish(fig, path)


def plot_heatmap(matrix, codes, path):
    k = len(codes)
    fig, ax = plt.subplots(figsize=(1.2 + 0.35 * k, 1.0 + 0.35 * k))
    im = ax.imshow(np.nan_to_num(matrix), cmap="RdBu_r", vmin=-1, vmax=1)
    ax.set_xticks(range(k), codes, rotation=90, fontsize=7)
    ax.set_yticks(range(k), codes, fontsize=7)
    fig.colorbar(im, ax=ax, shrink=0.8, label="Spearman r")
    return _finish(fig, path)


def plot_network(net, path):
    """Circular layout; edge width follows MI, colour follows the correlation sign."""
    k = len(net.nodes)
    ang = np.linspace(0, 2 * math.pi, k, endpoint=False)
    xy = np.c_[np.cos(ang), np.sin(ang)]
    fig, ax = plt.subplots(figsize=(5, 5))
    wmax = max((w for _, _, w, _ in net.edges), default=1.0) or 1.0
    for i, j, w, sign in net.edges:
        ax.plot(*xy[[i, j]].T, color="#d7191c" if sign > 0 else "#2b83ba",
                linewidth=0.5 + 4 * w / wmax, alpha=0.7)
    ax.scatter(*xy.T, s=60, color="0.2", zorder=3)
    for (x, y), name in zip(xy, net.nodes):
        ax.text(1.12 * x, 1.12 * y, name, ha="center", va="center", fontsize=8)
    ax.set_aspect("equal")
    ax.axis("off")
    return _finish(fig, path)


def plot_scatter(x, y, xlabel, ylabel, rho, path):
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(x, y, s=4, alpha=0.4, color="0.2")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(f"Spearman r = {rho:.2f}", fontsize=9)
    return _finish(fig, path)


def plot_history(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ep = [r["epoch"] for r in rows]
    ax.plot(ep, [r["train_loss"] for r in rows], label="train")
    ax.plot(ep, [r["val_loss"] for r in rows], label="validation")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("BCE loss")
    ax.legend(frameon=False)
    return _finish(fig, path)
