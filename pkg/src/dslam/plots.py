"""Figure rendering for the reporting commands.

Everything draws through the Agg backend and writes straight to files, so
the CLI stays headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def trajectory_overlay(est_xyz, gt_xyz, path, title="trajectory"):
    """Top-down (x, z) overlay of an estimated and a reference trajectory."""
    est = np.asarray(est_xyz)
    gt = np.asarray(gt_xyz)
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.plot(gt[:, 0], gt[:, 2], "-", color="0.4", lw=2, label="reference")
    ax.plot(est[:, 0], est[:, 2], "--", color="tab:red", lw=1.5,
            label="estimate")
    ax.scatter(gt[0, 0], gt[0, 2], marker="o", color="0.2", zorder=5)
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_title(title)
    ax.axis("equal")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def ablation_bars(rows, path, metric="ate_rmse"):
    """Bar chart of one metric across ablation rows.

    rows: list of (config_label, {metric: value}) pairs.
    """
    labels = [r[0] for r in rows]
    values = [r[1].get(metric, float("nan")) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, values, color="tab:blue")
    ax.set_ylabel(metric)
    ax.set_xlabel("configuration")
    ax.set_title(f"{metric} by ablation configuration")
    for i, v in enumerate(values):
        if np.isfinite(v):
            ax.annotate(f"{v:.3g}", (i, v), ha="center", va="bottom",
                        fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def depth_error_hist(ratios, path):
    """Histogram of per-pixel pred/gt depth ratios on a log axis."""
    ratios = np.asarray(ratios)
    ratios = ratios[np.isfinite(ratios) & (ratios > 0)]
    fig, ax = plt.subplots(figsize=(6, 4))
    if ratios.size:
        ax.hist(np.log(ratios), bins=60, color="tab:green")
    ax.axvline(0.0, color="0.2", lw=1)
    ax.set_xlabel("log(pred / gt)")
    ax.set_ylabel("pixels")
    ax.set_title("depth ratio distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
