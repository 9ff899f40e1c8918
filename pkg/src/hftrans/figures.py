"""Report figures rendered next to the CSV outputs.

Uses the Agg backend so rendering works headless; every function writes one
PNG and returns its path.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def loss_curve(loss_rows, path):
    """Per-step training loss."""
    steps = [s for s, _ in loss_rows]
    values = [v for _, v in loss_rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, values, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("combined loss")
    ax.set_title("training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def report_figure(report, path):
    """Mean Dice and HD95 per (mode, region) from a metrics report."""
    means = report.mean_rows()
    labels = [f"{mode}\n{region}" for mode, region, *_ in means]
    dice = [m[2] for m in means]
    hd95 = [m[3] for m in means]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(7, 1.2 * len(means)), 4))
    x = range(len(means))
    ax1.bar(x, dice, color="tab:blue")
    ax1.set_xticks(list(x), labels, fontsize=8)
    ax1.set_ylim(0, 1)
    ax1.set_ylabel("Dice")
    ax1.set_title("mean Dice")
    ax2.bar(x, hd95, color="tab:orange")
    ax2.set_xticks(list(x), labels, fontsize=8)
    ax2.set_ylabel("HD95 (mm)")
    ax2.set_title("mean HD95")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def ablation_figure(table, path):
    """Dice and HD95 per fusion mode from an ablation table."""
    modes = [row.mode for row in table]
    dice = [row.dice for row in table]
    hd95 = [row.hd95_mm for row in table]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 4))
    x = range(len(modes))
    ax1.bar(x, dice, color="tab:blue")
    ax1.set_xticks(list(x), modes, rotation=20)
    ax1.set_ylim(0, 1)
    ax1.set_ylabel("Dice")
    ax1.set_title("validation Dice by fusion mode")
    ax2.bar(x, hd95, color="tab:orange")
    ax2.set_xticks(list(x), modes, rotation=20)
    ax2.set_ylabel("HD95 (mm)")
    ax2.set_title("validation HD95 by fusion mode")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
