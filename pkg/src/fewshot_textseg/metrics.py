"""Foreground IoU and pixel AUROC, plus the evaluation report."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError


def fg_iou(pred_mask, gt_mask) -> float:
    pred, gt = np.asarray(pred_mask).astype(bool), np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def auroc(scores, gt_mask) -> float | None:
    """Mann-Whitney AUROC with ties counted one half; ``None`` for single-class labels."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(gt_mask).astype(bool).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"shape mismatch {s.shape} vs {y.shape}")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUROC undefined for single-class ground truth", RuntimeWarning, stacklevel=2)
        return None
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ImageScore:
    id: str
    fgiou: float
    auroc: float | None
    seed: int | None = None


@dataclass
class EvalReport:
    images: list[ImageScore]
    fingerprint: dict = field(default_factory=dict)
    pooled: dict | None = None
    rows: list[dict] = field(default_factory=list)  # per-seed and averaged summaries

    @property
    def mean_fgiou(self) -> float:
        return float(np.mean([im.fgiou for im in self.images])) if self.images else float("nan")

    @property
    def mean_auroc(self) -> float | None:
        vals = [im.auroc for im in self.images if im.auroc is not None]
        return float(np.mean(vals)) if vals else None

    def summary(self) -> dict:
        return {"mean_fgiou": self.mean_fgiou, "mean_auroc": self.mean_auroc, "count": len(self.images),
                "auroc_count": sum(im.auroc is not None for im in self.images)}

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "rows": self.rows, "pooled": self.pooled,
                "images": [asdict(im) for im in sorted(self.images, key=lambda i: (i.seed or 0, i.id))],
                "fingerprint": self.fingerprint}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        lines = [f"{'row':<12}{'FgIoU':>10}{'AUROC':>10}{'n':>6}"]
        for row in self.rows or [{"row": "all", **self.summary()}]:
            au = row.get("mean_auroc")
            lines.append(f"{str(row.get('row', '')):<12}{100 * row['mean_fgiou']:>10.2f}"
                         f"{(100 * au if au is not None else float('nan')):>10.2f}{row['count']:>6}")
        return "\n".join(lines)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "id", "fgiou", "auroc"])
            for im in sorted(self.images, key=lambda i: (i.seed or 0, i.id)):
                w.writerow([im.seed, im.id, f"{im.fgiou:.6f}", "" if im.auroc is None else f"{im.auroc:.6f}"])
        return path


def pooled_scores(preds, scores, gts) -> dict:
    """Dataset-level FgIoU and AUROC over all pixels at once."""
    inter = sum(int(np.logical_and(p.astype(bool), g.astype(bool)).sum()) for p, g in zip(preds, gts))
    union = sum(int(np.logical_or(p.astype(bool), g.astype(bool)).sum()) for p, g in zip(preds, gts))
    s = np.concatenate([np.ravel(x) for x in scores])
    y = np.concatenate([np.ravel(g) for g in gts])
    return {"fgiou": 1.0 if union == 0 else inter / union, "auroc": auroc(s, y)}
