"""File-based figures: score-map heatmaps, ablation plots and training curves."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402


def heatmap_rgb(score: np.ndarray, cmap: str = "viridis", vmin: float = 0.0, vmax: float = 1.0) -> np.ndarray:
    """(H, W) scores -> (H, W, 3) uint8 colour image."""
    s = np.asarray(score, dtype=np.float64)
    span = vmax - vmin if vmax > vmin else 1.0
    norm = np.clip((s - vmin) / span, 0.0, 1.0)
    rgba = matplotlib.colormaps[cmap](norm)
    return (rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)


def save_heatmap(score: np.ndarray, path, cmap: str = "viridis", vmin: float = 0.0, vmax: float | None = None) -> Path:
    """Write a heatmap PNG at the map's own resolution. ``vmax=None`` scales to the map maximum."""
    path = Path(path)
    s = np.asarray(score, dtype=np.float64)
    top = float(s.max()) if vmax is None else vmax
    Image.fromarray(heatmap_rgb(s, cmap, vmin, top if top > vmin else vmin + 1.0)).save(path)
    return path


def save_overlay(image_uint8: np.ndarray, mask: np.ndarray, path, colour=(255, 0, 80), alpha: float = 0.5) -> Path:
    path = Path(path)
    img = np.asarray(image_uint8, dtype=np.float64).copy()
    m = np.asarray(mask).astype(bool)
    img[m] = (1 - alpha) * img[m] + alpha * np.asarray(colour, dtype=np.float64)
    Image.fromarray(np.clip(img, 0, 255).astype(np.uint8)).save(path)
    return path


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def bar_plot(labels: Sequence[str], series: dict[str, Sequence[float]], path, title: str = "") -> Path:
    """Grouped bars, one group per label and one bar per series (values in [0, 1], shown as %)."""
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels) + 2), 3.6))
    x = np.arange(len(labels))
    width = 0.8 / max(len(series), 1)
    for i, (name, vals) in enumerate(series.items()):
        vals = [np.nan if v is None else 100.0 * v for v in vals]
        ax.bar(x + (i - (len(series) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("%")
    ax.set_title(title)
    ax.legend()
    return _finish(fig, path)


def line_plot(xs: Sequence[float], lines: dict[str, Sequence[float]], path, xlabel: str = "",
              ylabel: str = "FgIoU (%)", title: str = "", log_x: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, ys in lines.items():
        ax.plot(xs, [np.nan if y is None else 100.0 * y for y in ys], marker="o", label=name)
    if log_x:
        ax.set_xscale("log", base=2)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([str(x) for x in xs])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    return _finish(fig, path)


def curve_plot(curve: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    epochs = [row["epoch"] for row in curve]
    for key in ("L_align", "L_vp", "L_tri", "total"):
        ax.plot(epochs, [row[key] for row in curve], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    return _finish(fig, path)
