"""Figures for benchmark, MMD and RL outputs (matplotlib, file output only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps SVG output byte-stable across runs
_SAVE = {"metadata": {"Date": None}}
matplotlib.rcParams["svg.hashsalt"] = "tvomega"


def _finish(fig, ax, path, xlabel, ylabel, title):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fmt = str(path).rsplit(".", 1)[-1].lower()
    fig.savefig(path, format=fmt, **(_SAVE if fmt == "svg" else {}))
    plt.close(fig)


def accuracy_plot(summary_rows, path, title: str | None = None) -> None:
    """Mean next-step accuracy per protocol with a one-stderr band."""
    fig, ax = plt.subplots(figsize=(6.4, 3.8))
    for p in sorted({r["protocol"] for r in summary_rows}):
        rows = sorted((r for r in summary_rows if r["protocol"] == p), key=lambda r: r["t"])
        t = np.array([r["t"] for r in rows])
        m = np.array([float(r["mean_accuracy"]) for r in rows])
        se = np.array([float(r["stderr"]) for r in rows])
        ax.plot(t, m, label=p, lw=1.4)
        ax.fill_between(t, m - se, m + se, alpha=0.2, lw=0)
    _finish(fig, ax, path, "step t", "accuracy on step t+1", title)


def mmd_plot(report_rows, path, title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 3.8))
    t = np.array([int(r["t"]) for r in report_rows])
    ax.plot(t, [float(r["mmd_unweighted"]) for r in report_rows], label="unweighted", lw=1.4)
    ax.plot(t, [float(r["mmd_weighted"]) for r in report_rows], label="omega-weighted", lw=1.4)
    _finish(fig, ax, path, "step t", "squared MMD to earlier steps", title)


def rl_plot(curves: dict, path, title: str | None = None, smooth: int = 10) -> None:
    """``curves`` maps a label to a list of per-seed return sequences."""
    fig, ax = plt.subplots(figsize=(6.4, 3.8))
    for label, seqs in sorted(curves.items()):
        arr = np.asarray(seqs, dtype=float)
        mean = arr.mean(axis=0)
        if smooth > 1 and len(mean) >= smooth:
            mean = np.convolve(mean, np.ones(smooth) / smooth, mode="valid")
        ax.plot(np.arange(len(mean)) + (smooth - 1 if smooth > 1 else 0), mean, label=label, lw=1.4)
    _finish(fig, ax, path, "episode", "greedy return", title)
