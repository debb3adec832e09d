"""Report figures written next to the CSV outputs (Agg backend, PNG)."""
from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io_utils import atomic_path  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    with atomic_path(path) as tmp:
        fig.savefig(tmp, format="png", dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_loss_curves(reports: Sequence, path: str | os.PathLike):
    epochs = [r.epoch for r in reports]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [r.mean_train_loss for r in reports], marker="o", label="train")
    ax.plot(epochs, [r.mean_val_loss for r in reports], marker="s", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_metrics(reports: Sequence, path: str | os.PathLike):
    names = ("ssim", "fsim", "flicker_index")
    fig, axes = plt.subplots(1, 3, figsize=(8, 3))
    for ax, name in zip(axes, names):
        values = np.array([getattr(r, name) for r in reports], dtype=float)
        ax.boxplot(values[np.isfinite(values)], widths=0.5)
        ax.scatter(np.ones(len(values)), values, s=10, alpha=0.6)
        ax.set_title(name)
        ax.set_xticks([])
    fig.tight_layout()
    return _save(fig, path)


def plot_effect_sizes(results: Sequence, path: str | os.PathLike):
    """Grouped bars of epsilon-squared per hemisphere x subfield and image type."""
    keys = list(dict.fromkeys((r.hemisphere, r.subfield) for r in results))
    types = list(dict.fromkeys(r.image_type for r in results))
    lookup = {(r.hemisphere, r.subfield, r.image_type): r for r in results}
    x = np.arange(len(keys))
    width = 0.8 / max(len(types), 1)
    fig, ax = plt.subplots(figsize=(max(6, 0.55 * len(keys)), 3.5))
    for j, itype in enumerate(types):
        vals = [lookup[(h, s, itype)].epsilon_sq if (h, s, itype) in lookup else np.nan for h, s in keys]
        bars = ax.bar(x + j * width, vals, width, label=itype)
        for bar, (h, s) in zip(bars, keys):
            r = lookup.get((h, s, itype))
            if r is not None and r.p_fdr < 0.05:
                ax.annotate("*", (bar.get_x() + bar.get_width() / 2, bar.get_height()), ha="center")
    ax.set_xticks(x + width * (len(types) - 1) / 2)
    ax.set_xticklabels([f"{h[0].upper()} {s}" for h, s in keys], rotation=60, ha="right", fontsize=8)
    ax.set_ylabel("epsilon squared")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_agreement(table, path: str | os.PathLike):
    labels = [f"{h[0].upper()} {s}" for h, s in zip(table["hemisphere"], table["subfield"])]
    fig, ax = plt.subplots(figsize=(max(6, 0.55 * len(labels)), 3.5))
    ax.bar(np.arange(len(labels)), table["pct_diff"].to_numpy(dtype=float))
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=8)
    ax.set_ylabel("mean % difference (synth vs acquired)")
    fig.tight_layout()
    return _save(fig, path)


def plot_augment_preview(before: np.ndarray, after: np.ndarray, path: str | os.PathLike):
    """Middle slice before and after augmentation, plus their difference."""
    k = before.shape[-1] // 2
    a, b = before[..., k], after[..., k]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, img, title in zip(axes, (a, b, b - a), ("before", "after", "difference")):
        im = ax.imshow(img.T, cmap="gray" if title != "difference" else "coolwarm", origin="lower")
        ax.set_title(title)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)
