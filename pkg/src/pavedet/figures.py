"""Figure rendering for report outputs.

Every report-producing command saves charts next to its delimited output;
these helpers do the drawing. All functions write a PNG and return its
path. The Agg backend is forced so rendering works without a display.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .evaluation import pr_curve  # noqa: E402


def save_pr_curves(preds, gts, class_names, path, iou_threshold: float = 0.5):
    """One precision/recall trace per class that has ground truth."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 5))
    present = {g.class_id for g in gts}
    for cid, name in enumerate(class_names):
        if cid not in present:
            continue
        curve = pr_curve(preds, gts, cid, iou_threshold)
        pts = [(0.0, 1.0)] + list(curve.points)
        ax.plot([r for r, _ in pts], [p for _, p in pts],
                drawstyle="steps-post", label=name)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"PR curves (IoU {iou_threshold:g})")
    if present:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_training_curves(log_rows, path, best_epoch=None):
    """Loss and training mAP50 against epoch, on twin axes."""
    path = Path(path)
    epochs = [e for e, _, _ in log_rows]
    losses = [l for _, l, _ in log_rows]
    maps = [m for _, _, m in log_rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(epochs, losses, color="tab:red", label="loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss", color="tab:red")
    ax1.set_yscale("log")
    ax2 = ax1.twinx()
    ax2.plot(epochs, maps, color="tab:blue", label="train mAP50")
    ax2.set_ylabel("train mAP50", color="tab:blue")
    ax2.set_ylim(0, 1.02)
    if best_epoch is not None and best_epoch >= 0:
        ax2.axvline(best_epoch, color="gray", linestyle=":", linewidth=1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_ablation_chart(rows, path):
    """Bar chart of mAP50 and F1 per configuration, FLOPs annotated."""
    path = Path(path)
    labels = [r["config"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - 0.2, [r["map50"] for r in rows], width=0.4, label="mAP50")
    ax.bar(x + 0.2, [r["f1"] for r in rows], width=0.4, label="F1")
    for xi, r in zip(x, rows):
        ax.text(xi, 1.03, f"{r['flops'] / 1e6:.1f}M", ha="center", fontsize=8)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0, 1.12)
    ax.set_ylabel("score")
    ax.set_title("attention placement ablation (FLOPs above bars)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_bench_chart(rows, path):
    """Horizontal stacked bars of per-phase times, FPS annotated."""
    path = Path(path)
    labels = [r["label"] for r in rows]
    pre = np.array([r["t_pre"] for r in rows]) * 1e3
    inf = np.array([r["t_inference"] for r in rows]) * 1e3
    post = np.array([r["t_post"] for r in rows]) * 1e3
    y = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7, 1.2 + 0.6 * len(rows)))
    ax.barh(y, pre, label="pre")
    ax.barh(y, inf, left=pre, label="inference")
    ax.barh(y, post, left=pre + inf, label="post")
    for yi, r in zip(y, rows):
        ax.text(float(pre[yi] + inf[yi] + post[yi]) * 1.01, yi,
                f"{r['fps']:.1f} FPS", va="center", fontsize=8)
    ax.set_yticks(y)
    ax.set_yticklabels(labels, fontsize=8)
    ax.set_xlabel("time per image (ms)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_featuremap_grid(fm, path, max_channels: int = 16):
    """Montage of the first channels of a (C, H, W) activation map."""
    path = Path(path)
    arr = fm.data if hasattr(fm, "data") else np.asarray(fm)
    if arr.ndim == 4:
        arr = arr[0]
    n = min(max_channels, arr.shape[0])
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2 * cols, 2 * rows))
    axes = np.atleast_1d(axes).ravel()
    for k in range(n):
        axes[k].imshow(arr[k], cmap="viridis")
        axes[k].set_title(f"ch {k}", fontsize=7)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
