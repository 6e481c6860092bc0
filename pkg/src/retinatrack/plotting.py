"""Matplotlib figures written next to the CSV reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "retinatrack",
    "svg.fonttype": "none",
}


def savefig(fig, path, formats=("svg",)):
    """Save ``fig`` under ``path`` (suffix replaced per format) and close it."""
    path = Path(path)
    out = []
    for ext in formats:
        p = path.with_suffix("." + ext)
        fig.savefig(p, bbox_inches="tight", metadata={"Date": None} if ext == "svg" else None)
        out.append(p)
    plt.close(fig)
    return out


def plot_coverage(table, path, labels=("mean error", "E95")):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.step(table.thresholds, table.mean_coverage, where="post", label=labels[0])
        ax.step(table.thresholds, table.e95_coverage, where="post", label=labels[1], ls="--")
        ax.set_xlabel("error threshold (deg)")
        ax.set_ylabel("fraction of trials")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(frameon=False)
        return savefig(fig, path)


def plot_robustness(rows: Sequence, path):
    s = np.array([r.noise_std for r in rows])
    m = np.array([r.max_node_error_mean for r in rows])
    sd = np.array([r.max_node_error_std for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.errorbar(s, m, yerr=sd, marker="o", capsize=3)
        ax.set_xlabel("pairwise noise std (px)")
        ax.set_ylabel("max node error (deg)")
        return savefig(fig, path)


def plot_edge_removal(rows: Sequence, path, limit_deg=None):
    shifts = np.array([r.max_shift_deg for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(np.arange(len(shifts)), shifts, width=0.8)
        if limit_deg is not None:
            ax.axhline(limit_deg, color="k", ls=":", lw=1)
        ax.set_xlabel("removed edge")
        ax.set_ylabel("max node shift (deg)")
        return savefig(fig, path)


def plot_error_cdf(errors_by_trial: dict, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, e in errors_by_trial.items():
            e = np.sort(np.asarray(e))
            if e.size:
                ax.plot(e, np.arange(1, e.size + 1) / e.size, label=str(name))
        ax.set_xlabel("angular error (deg)")
        ax.set_ylabel("cumulative fraction")
        ax.legend(frameon=False, fontsize=7)
        return savefig(fig, path)


def plot_latency(stage_ms: dict, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = list(stage_ms)
        ax.barh(names, [stage_ms[k] for k in names])
        ax.invert_yaxis()
        ax.set_xlabel("mean latency (ms)")
        return savefig(fig, path)


def plot_space(space, path):
    """Canonical entries and bundle-adjusted frame centers."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.scatter(space.positions[:, 0], space.positions[:, 1], s=0.5, alpha=0.4)
        n = space.node_positions
        ax.scatter(n[:, 0], n[:, 1], c="C3", s=12, marker="s")
        ax.set_aspect("equal")
        ax.invert_yaxis()
        ax.set_xlabel("x (px)")
        ax.set_ylabel("y (px)")
        return savefig(fig, path)
