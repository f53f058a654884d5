"""Matplotlib renderings of run artifacts: loss curves, per-class IoU bars,
margin diagnostics, sweep curves, and importance-map images.

Every function writes a file and returns its path; figures are closed
eagerly so batch CLI runs do not accumulate state.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .evalkit import MarginStats, MetricsReport
from .trainer import TrainLog


def save_loss_curves(log: TrainLog, path: str, title: str = "training loss") -> str:
    rows = np.array([r[:-1] for r in log.rows], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(7, 4))
    if rows.size:
        steps = rows[:, 0]
        for col, name in ((1, "ia"), (2, "pe"), (3, "ps"), (4, "im")):
            if np.any(rows[:, col] != 0):
                ax.plot(steps, rows[:, col], label=f"loss_{name}", linewidth=1)
        ax.plot(steps, rows[:, 5], label="total", color="black", linewidth=1.5)
        ax.legend(fontsize=8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_iou_bars(report: MetricsReport, path: str, title: str = "per-class IoU") -> str:
    iou = np.asarray(report.iou, dtype=np.float64)
    classes = np.arange(iou.size)
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * iou.size + 2), 4))
    vals = np.where(np.isnan(iou), 0.0, iou)
    bars = ax.bar(classes, vals, color="tab:blue")
    for c, bar in enumerate(bars):
        if np.isnan(iou[c]):
            bar.set_color("lightgray")
    ax.axhline(report.miou, color="tab:red", linestyle="--",
               label=f"mIoU = {report.miou:.3f}")
    ax.set_xlabel("class")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    ax.set_xticks(classes)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_margin_bars(stats: MarginStats, path: str) -> str:
    names = ["mean p1", "mean p2", "mean importance"]
    correct = [stats.mean_p1_correct, stats.mean_p2_correct, stats.mean_importance_correct]
    wrong = [stats.mean_p1_wrong, stats.mean_p2_wrong, stats.mean_importance_wrong]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.18, [0.0 if v is None else v for v in correct], width=0.36,
           label=f"correct (n={stats.n_correct})", color="tab:green")
    ax.bar(x + 0.18, [0.0 if v is None else v for v in wrong], width=0.36,
           label=f"wrong (n={stats.n_wrong})", color="tab:orange")
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1)
    gap = stats.importance_gap()
    ax.set_title("confidence margins by correctness"
                 + (f" (importance gap {gap:+.3f})" if gap is not None else ""))
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_sweep_curve(rows: list[dict], param: str, path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r["value"] for r in rows]
    ys = [r["miou"] for r in rows]
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(param)
    ax.set_ylabel("mIoU")
    ax.set_title(f"sweep over {param}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_importance_png(omega: np.ndarray, path: str) -> str:
    """Grayscale importance map; 255 = weight 1."""
    u8 = np.clip(np.round(np.asarray(omega, dtype=np.float64) * 255.0), 0, 255)
    Image.fromarray(u8.astype(np.uint8), mode="L").save(path)
    return path
