"""Score maps and the patch-grid to pixel upsampling they share."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError


@dataclass
class ScoreMap:
    grid: np.ndarray  # (h, w) float64 in [0, 1]
    source: str  # "visual" | "prompt" | "fused"
    polarity: str  # "fg" | "bg"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ShapeError(f"score map must be 2-D, got {self.grid.shape}")

    @property
    def shape(self):
        return self.grid.shape

    def upsampled(self, size) -> "ScoreMap":
        return ScoreMap(upsample(self.grid, size), self.source, self.polarity)


def upsample(grid: np.ndarray, size) -> np.ndarray:
    """Bilinear resize with half-pixel centres (align_corners=False)."""
    if isinstance(size, int):
        size = (size, size)
    size = tuple(int(s) for s in size)
    if grid.shape == size:
        return np.array(grid, dtype=np.float64)
    t = torch.from_numpy(np.ascontiguousarray(grid, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def as_grid(x) -> np.ndarray:
    return x.grid if isinstance(x, ScoreMap) else np.asarray(x, dtype=np.float64)


def cosine_max(queries: np.ndarray, memory: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Row-wise max cosine similarity of ``queries`` (n, d) against ``memory`` (m, d)."""
    if queries.shape[-1] != memory.shape[-1]:
        raise ShapeError(f"dim mismatch: query {queries.shape[-1]} vs memory {memory.shape[-1]}")
    q = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    m = memory / np.maximum(np.linalg.norm(memory, axis=1, keepdims=True), 1e-12)
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        out[s:s + chunk] = (q[s:s + chunk] @ m.T).max(axis=1)
    return np.clip(out, -1.0, 1.0)
