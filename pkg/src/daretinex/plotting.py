"""Static matplotlib figures: comparison grids, loss curves, metric summaries."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 150

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "savefig.bbox": "tight",
})


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def comparison_grid(
    images: Sequence[np.ndarray],
    labels: Sequence[str],
    path,
    annotations: Optional[Sequence[str]] = None,
    panel_width: float = 3.0,
):
    """One row of panels, each titled with its label and an optional metric line."""
    n = len(images)
    if n == 0:
        raise ValueError("comparison_grid needs at least one image")
    h, w = images[0].shape[:2]
    fig, axes = plt.subplots(1, n, figsize=(panel_width * n, panel_width * h / w + 0.6), squeeze=False)
    for k, (ax, img, label) in enumerate(zip(axes[0], images, labels)):
        img = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
        if img.ndim == 3 and img.shape[2] == 1:
            ax.imshow(img[..., 0], cmap="gray", vmin=0, vmax=1)
        else:
            ax.imshow(img)
        title = label
        if annotations and annotations[k]:
            title += "\n" + annotations[k]
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def plot_loss_history(history: Sequence[Dict[str, float]], path, title: str = "", window: int = 50):
    keys = [k for k in history[0] if k not in ("step", "epoch", "grad_norm", "decom_grad_norm",
                                               "i_out_min", "i_out_max", "wall")]
    steps = np.array([rec["step"] for rec in history])
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for key in keys:
        y = np.array([rec[key] for rec in history], dtype=np.float64)
        if len(y) >= window:
            y = np.convolve(y, np.ones(window) / window, mode="valid")
            x = steps[window - 1:]
        else:
            x = steps
        ax.plot(x, y, label=key, lw=1.2 if key == "total" else 0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss (moving average)")
    if title:
        ax.set_title(title)
    ax.legend(ncol=2)
    return _save(fig, path)


def plot_metric_summary(per_image: Dict[str, Dict[str, float]], path, metrics: Sequence[str] = ("psnr", "ssim", "delta_e")):
    ids = list(per_image)
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 2.8), squeeze=False)
    for ax, name in zip(axes[0], metrics):
        values = [per_image[i][name] for i in ids]
        ax.bar(range(len(ids)), values, color="0.35")
        ax.axhline(float(np.mean(values)), color="C3", lw=1, label="mean")
        ax.set_title(name)
        ax.set_xticks(range(len(ids)))
        ax.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
    axes[0][0].legend()
    return _save(fig, path)
