"""Report rendering: delimited records plus matplotlib figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402


def write_metrics_csv(reports, path):
    """One row per subject pair, columns documented by MetricReport.FIELDS."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(MetricReport.FIELDS))
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())
    return path


def format_metric_table(reports, mean_std=True):
    """Human-readable fixed-width table, one line per pair plus a summary row."""
    lines = [f"{'pair':<14} {'Dice %':>8} {'HD95 mm':>9} {'|J|<=0 %':>9} {'params':>9} {'time s':>8}"]
    for r in reports:
        lines.append(f"{r.pair_id:<14} {r.dice_mean_pct:8.2f} {r.hd95_mm:9.3f} "
                     f"{r.neg_jac_pct:9.3f} {r.param_count:9d} {r.wall_time_s:8.3f}")
    if mean_std and reports:
        import numpy as np

        dice = np.array([r.dice_mean_pct for r in reports])
        hd = np.array([r.hd95_mm for r in reports])
        nj = np.array([r.neg_jac_pct for r in reports])
        lines.append("-" * len(lines[0]))
        lines.append(
            f"{'mean+/-std':<14} "
            f"{dice.mean():5.2f}+/-{dice.std():5.2f} "
            f"{hd.mean():5.3f}+/-{hd.std():5.3f} "
            f"{nj.mean():5.3f}+/-{nj.std():5.3f}"
        )
    return "\n".join(lines)


def render_metrics_figure(reports, path):
    """Per-pair Dice and HD95 bars next to the CSV."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    ids = [r.pair_id for r in reports]
    axes[0].bar(range(len(ids)), [r.dice_mean_pct for r in reports], color="#3b75af")
    axes[0].set_ylabel("Dice (%)")
    axes[0].set_ylim(0, 100)
    axes[1].bar(range(len(ids)), [r.hd95_mm for r in reports], color="#c0504d")
    axes[1].set_ylabel("HD95 (mm)")
    for ax in axes:
        ax.set_xticks(range(len(ids)))
        ax.set_xticklabels(ids, rotation=60, fontsize=6, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_loss_curves(history, path):
    """Loss terms against training step."""
    steps = [h["step"] for h in history if "total" in h]
    if not steps:
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, color in (("total", "k"), ("dice", "#3b75af"),
                       ("smooth", "#70ad47"), ("supcon", "#c0504d")):
        ys = [(h["step"], h[key]) for h in history if key in h]
        if ys:
            ax.plot([s for s, _ in ys], [v for _, v in ys], color=color, label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_bench_figure(rows, exponent, path):
    """Log-log wall time against sequence length for both scan paths."""
    fig, ax = plt.subplots(figsize=(6, 4))
    Ls = [r["length"] for r in rows]
    ax.loglog(Ls, [r["sequential_s"] for r in rows], "o-", label="sequential", base=2)
    ax.loglog(Ls, [r["parallel_s"] for r in rows], "s-", label="chunked", base=2)
    ax.set_xlabel("sequence length")
    ax.set_ylabel("median wall time (s)")
    ax.set_title(f"sequential scaling exponent: {exponent:.3f}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_bench_csv(rows, path):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["length", "sequential_s", "parallel_s", "max_abs_diff"])
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
    return path
