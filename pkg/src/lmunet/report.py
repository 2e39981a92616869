"""Matplotlib figure rendering for the CLI report paths.

Figures are written next to the delimited outputs; everything uses the Agg
backend so reports work headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_cost_figure(cost_report, path, top=20):
    rows = [r for r in cost_report.rows if r.params or r.flops]
    rows = sorted(rows, key=lambda r: r.params, reverse=True)[:top]
    names = [r.name for r in rows][::-1]
    params = [r.params for r in rows][::-1]
    flops = [r.flops for r in rows][::-1]
    fig, axes = plt.subplots(1, 2, figsize=(11, max(3, 0.3 * len(rows) + 1)))
    axes[0].barh(names, params, color="tab:blue")
    axes[0].set_xlabel("parameters")
    axes[1].barh(names, flops, color="tab:orange")
    axes[1].set_xlabel("FLOPs")
    axes[1].set_yticklabels([])
    fig.suptitle("largest layers by parameter count")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_figure(rows, path):
    """rows: (length, kernel, median_ns) tuples."""
    kernels = sorted({r[1] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for kernel in kernels:
        pts = sorted((r[0], r[2]) for r in rows if r[1] == kernel)
        ax.plot([p[0] for p in pts], [p[1] / 1e6 for p in pts],
                marker="o", label=kernel)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length")
    ax.set_ylabel("median time (ms)")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(log_rows, path):
    epochs = [r["epoch"] for r in log_rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(epochs, [r["loss"] for r in log_rows], color="tab:red", label="loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss", color="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [r["train_dsc"] for r in log_rows], color="tab:blue",
             label="train DSC")
    ax2.set_ylabel("train DSC", color="tab:blue")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_figure(report, class_names, path):
    idx = np.arange(len(report.per_class_dsc))
    width = 0.4
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(idx - width / 2, report.per_class_dsc, width, label="DSC")
    ax.bar(idx + width / 2, report.per_class_iou, width, label="IoU")
    ax.set_xticks(idx)
    ax.set_xticklabels(class_names[:len(idx)] if class_names else idx)
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.set_title(f"per-class metrics over {report.n_samples} samples")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(rows, path):
    """rows: dicts with variant, params, flops, mean_dsc."""
    variants = [r["variant"] for r in rows]
    idx = np.arange(len(variants))
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].bar(idx, [r["params"] / 1e6 for r in rows], color="tab:blue")
    axes[0].set_ylabel("parameters (M)")
    axes[1].bar(idx, [r["flops"] / 1e9 for r in rows], color="tab:orange")
    axes[1].set_ylabel("GFLOPs")
    for ax in axes:
        ax.set_xticks(idx)
        ax.set_xticklabels(variants, rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _middle_slice(volume):
    if volume.ndim == 3:
        return volume[volume.shape[0] // 2]
    return volume


def save_overlay(image, mask, pred, path):
    """Grayscale image with ground-truth and predicted label contours.

    3D volumes show the middle axial slice.
    """
    img = _middle_slice(np.asarray(image[0] if image.ndim > mask.ndim else image))
    gt = _middle_slice(np.asarray(mask))
    pd = _middle_slice(np.asarray(pred)) if pred is not None else None
    cols = 2 if pd is None else 3
    fig, axes = plt.subplots(1, cols, figsize=(3.2 * cols, 3.4))
    axes[0].imshow(img, cmap="gray")
    axes[0].set_title("image")
    axes[1].imshow(img, cmap="gray")
    axes[1].imshow(np.ma.masked_equal(gt, 0), cmap="autumn", alpha=0.5,
                   interpolation="nearest")
    axes[1].set_title("ground truth")
    if pd is not None:
        axes[2].imshow(img, cmap="gray")
        axes[2].imshow(np.ma.masked_equal(pd, 0), cmap="autumn", alpha=0.5,
                       interpolation="nearest")
        axes[2].set_title("prediction")
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
