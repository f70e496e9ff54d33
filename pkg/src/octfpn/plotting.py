"""Matplotlib figures written next to the text reports (Agg backend, PNG files)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import COLUMN_TITLES, METRIC_COLUMNS  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no timestamps or software tags, so identical inputs give identical files
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def learning_curves(log: Sequence[Mapping], path) -> Path:
    """Train / validation loss per epoch, one panel row per fold, LR on a twin axis."""
    folds = sorted({r["fold"] for r in log})
    fig, axes = plt.subplots(len(folds), 1, figsize=(6, 2.4 * len(folds)), squeeze=False)
    for ax, fold in zip(axes[:, 0], folds):
        rows = [r for r in log if r["fold"] == fold]
        ep = [r["epoch"] for r in rows]
        ax.plot(ep, [r["train_loss"] for r in rows], label="train")
        ax.plot(ep, [r["val_loss"] for r in rows], label="validation")
        ax.set_ylabel(f"fold {fold} loss")
        lr_ax = ax.twinx()
        lr_ax.step(ep, [r["lr"] for r in rows], where="post", color="0.6", linewidth=0.8)
        lr_ax.set_yscale("log")
        lr_ax.set_ylabel("lr", color="0.4")
        ax.legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("epoch")
    fig.tight_layout()
    return _save(fig, path)


def fold_metrics(reports: Sequence, path) -> Path:
    """Grouped bars of accuracy / sensitivity / specificity per fold."""
    cols = [c for c in METRIC_COLUMNS if c != "weighted_cce_loss"]
    fig, ax = plt.subplots(figsize=(6, 3))
    x = np.arange(len(reports))
    width = 0.8 / len(cols)
    for j, col in enumerate(cols):
        ax.bar(x + j * width, [getattr(r, col) for r in reports], width, label=COLUMN_TITLES[col])
    ax.set_xticks(x + width * (len(cols) - 1) / 2, [f"fold {i}" for i in range(len(reports))])
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def scale_sweep(rows: Sequence[tuple[int, float, float]], path, ylabel: str = "small-lesion recall (%)") -> Path:
    """Mean ± std of one metric against the number of merged scales."""
    ks = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.errorbar(ks, [r[1] for r in rows], yerr=[r[2] for r in rows], marker="o", capsize=3)
    ax.set_xticks(ks, [f"top-{k}" for k in ks])
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    return _save(fig, path)


def heatmap_panel(image: np.ndarray, heatmaps: Sequence, path, title: str = "") -> Path:
    """Input image followed by one heatmap per scale at native resolution."""
    n = len(heatmaps) + 1
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4))
    img = np.asarray(image)
    axes[0].imshow(img[..., 0] if img.ndim == 3 else img, cmap="gray")
    axes[0].set_title("input", fontsize=9)
    for ax, hm in zip(axes[1:], heatmaps):
        ax.imshow(hm.grid, cmap="jet", vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(f"scale {hm.scale} ({hm.grid.shape[0]}x{hm.grid.shape[1]})", fontsize=9)
    for ax in axes:
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, path)
