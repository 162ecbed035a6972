"""Figures for the CLI reports, rendered off-screen to PNG."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import TERMS  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_loss_curves(rows, path, boundary=None, title="training loss"):
    """Total and per-term losses against epoch on a log axis."""
    fig, ax = plt.subplots(figsize=(7, 4.2))
    epochs = np.array([r["epoch"] for r in rows])
    ax.plot(epochs, [r["loss_total"] for r in rows], color="black", lw=1.8, label="total")
    for t in TERMS:
        v = np.array([r["loss_" + t] for r in rows], dtype=float)
        if np.any(v > 0):
            ax.plot(epochs, np.where(v > 0, v, np.nan), lw=0.9, label=t)
    if boundary is not None:
        ax.axvline(boundary, color="grey", ls="--", lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=3)
    _save(fig, path)


def plot_trajectory(traj, path, goals=None, title="surface trace"):
    """Path in 3-D coloured by controller mode, plus the distance error over time."""
    fig = plt.figure(figsize=(9, 4))
    ax = fig.add_subplot(1, 2, 1, projection="3d")
    mode = np.array(traj.mode)
    for m, c in (("approach", "tab:blue"), ("follow", "tab:red")):
        sel = mode == m
        if sel.any():
            ax.scatter(*traj.x[sel].T, s=1.5, color=c, label=m)
    if goals is not None and len(goals):
        ax.scatter(*np.asarray(goals).T, marker="x", color="black", s=18, label="goals")
    ax.set_title(title)
    ax.legend(fontsize=7)
    ax2 = fig.add_subplot(1, 2, 2)
    ax2.plot(traj.t, traj.d, lw=1)
    ax2.set_xlabel("t")
    ax2.set_ylabel("d(x)")
    _save(fig, path)


def plot_metric_bars(labels, values, path, ylabel, title=""):
    """One bar per variant (ablation or benchmark rows)."""
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(labels) + 2), 3.6))
    ax.bar(np.arange(len(labels)), values, color="tab:gray")
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    _save(fig, path)
