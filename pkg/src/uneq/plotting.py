"""Figures for the diagnostics report."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STATUS_COLORS = {"HEALTHY": "#d9f0d3", "EXPLODING": "#f4a582", "STATIC": "#c6dbef"}

plt.rcParams.update({
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.linewidth": 0.6,
    "lines.linewidth": 0.9,
})


def _shade(ax, steps, statuses):
    # windows are labelled by their last step; colour the span each one closes
    if not statuses:
        return
    edges = np.asarray(steps, dtype=float)
    start = 0
    for i in range(1, len(statuses) + 1):
        if i == len(statuses) or statuses[i] != statuses[start]:
            ax.axvspan(edges[start], edges[i - 1] + 1, color=STATUS_COLORS[statuses[start]], lw=0, zorder=0)
            start = i


def plot_diagnostics(records, window_steps, window_statuses, path, title: str | None = None):
    """Losses, gradient norms and diversity over training, shaded by window status."""
    steps = np.array([r.step for r in records])
    fig, axes = plt.subplots(3, 1, figsize=(6.5, 6.0), sharex=True, constrained_layout=True)

    ax = axes[0]
    for name, label in (("loss_d", "D"), ("loss_g1", "G1"), ("loss_g2", "G2")):
        ax.plot(steps, [getattr(r, name) for r in records], label=label)
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", frameon=False, ncol=3)

    ax = axes[1]
    for name, label in (("grad_norm_d", "D"), ("grad_norm_g1", "G1"), ("grad_norm_g2", "G2")):
        vals = np.array([getattr(r, name) for r in records], dtype=float)
        ax.plot(steps, np.where(vals > 0, vals, np.nan), label=label)
    ax.set_yscale("log")
    ax.set_ylabel("grad norm")

    ax = axes[2]
    ax.plot(steps, [r.diversity_g1 for r in records], label="G1")
    ax.plot(steps, [r.diversity_g2 for r in records], label="G2")
    ax.set_ylabel("colour diversity")
    ax.set_xlabel("step")
    ax.legend(loc="upper right", frameon=False, ncol=2)

    for ax in axes:
        _shade(ax, window_steps, window_statuses)
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    if title:
        axes[0].set_title(title)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
