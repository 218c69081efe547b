"""Visual memories of masked support features and query scoring against them."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _blocks
from .backend import Backend, ImageEncoding
from .data import SupportSample
from .errors import BackendMismatchError, DataError, EmptyForegroundWarning, ShapeError
from .maps import ScoreMap, cosine_max, upsample

BANK_FORMAT = "fewshot-textseg/visual-bank"
BANK_VERSION = 1


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def patch_coverage(mask: np.ndarray, patch: int) -> np.ndarray:
    """Share of mask-1 pixels in each cell."""
    h, w = mask.shape
    return mask.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3))


def patch_membership(mask: np.ndarray, patch: int, min_fraction: float = 0.0):
    """Boolean (fg, bg) cell grids.

    A cell is foreground when its share of mask-1 pixels exceeds
    ``min_fraction`` (0 means a single pixel suffices); background likewise
    for mask-0 pixels.
    """
    frac = patch_coverage(mask, patch)
    return frac > min_fraction, (1.0 - frac) > min_fraction


@dataclass
class MaskedFeatures:
    support_id: str
    fg: list[np.ndarray]  # per layer (n_fg, d)
    bg: list[np.ndarray]  # per layer (n_bg, d)
    pooled_fg: list[np.ndarray | None]  # per layer (d,)
    pooled_bg: list[np.ndarray | None]

    @property
    def empty_fg(self) -> bool:
        return self.fg[0].shape[0] == 0

    @property
    def empty_bg(self) -> bool:
        return self.bg[0].shape[0] == 0


def extract_masked_features(sample: SupportSample, backend: Backend, min_fraction: float = 0.0) -> MaskedFeatures:
    m = sample.mask.astype(np.float64)[..., None]
    enc_fg = backend.encode_image(sample.image * m)
    enc_bg = backend.encode_image(sample.image * (1.0 - m))
    patch = backend.descriptor.patch_size
    fg_cells, bg_cells = patch_membership(sample.mask, patch, min_fraction)
    fg = [layer[fg_cells] for layer in enc_fg.layer_maps]
    bg = [layer[bg_cells] for layer in enc_bg.layer_maps]
    # pooled features weight each member cell by how much of it is actually covered
    cover = patch_coverage(sample.mask.astype(np.float64), patch)
    w_fg, w_bg = cover[fg_cells], (1.0 - cover)[bg_cells]
    pooled_fg = [_unit(w_fg @ x) if len(x) else None for x in fg]
    pooled_bg = [_unit(w_bg @ x) if len(x) else None for x in bg]
    out = MaskedFeatures(sample.id, fg, bg, pooled_fg, pooled_bg)
    if out.empty_fg:
        warnings.warn(f"support {sample.id} has an empty foreground", EmptyForegroundWarning, stacklevel=2)
    if out.empty_bg:
        warnings.warn(f"support {sample.id} has an empty background", EmptyForegroundWarning, stacklevel=2)
    return out


@dataclass
class LayerMemory:
    fg: np.ndarray  # (n_fg, d)
    bg: np.ndarray  # (n_bg, d)
    pooled_fg: np.ndarray  # (n_supports_with_fg, d)
    pooled_bg: np.ndarray  # (n_supports_with_bg, d)

    def __post_init__(self):
        for arr in (self.fg, self.bg, self.pooled_fg, self.pooled_bg):
            arr.setflags(write=False)


@dataclass
class VisualFeatureBank:
    layers: list[LayerMemory]
    support_ids: list[str]
    pooled_fg_ids: list[str]
    pooled_bg_ids: list[str]
    backend_hash: str
    dim: int
    meta: dict = field(default_factory=dict)

    def counts(self) -> list[dict]:
        return [{"fg": len(m.fg), "bg": len(m.bg)} for m in self.layers]

    def pooled(self, polarity: str, layer: int = -1, support_ids=None) -> np.ndarray:
        mem = self.layers[layer]
        arr, ids = (mem.pooled_fg, self.pooled_fg_ids) if polarity == "fg" else (mem.pooled_bg, self.pooled_bg_ids)
        if support_ids is None:
            return arr
        rows = [ids.index(s) for s in support_ids if s in ids]
        return arr[rows]


def build_bank(supports: list[SupportSample], backend: Backend, min_fraction: float = 0.0) -> VisualFeatureBank:
    if not supports:
        raise DataError("at least one support sample is required")
    feats = [extract_masked_features(s, backend, min_fraction) for s in supports]
    if all(f.empty_fg for f in feats):
        raise DataError("every support has an empty foreground; nothing to segment with")
    d = backend.descriptor.feature_dim
    layers = []
    for li in range(len(feats[0].fg)):
        def stack(rows):
            rows = [r for r in rows if r is not None]
            return np.concatenate(rows, axis=0) if rows else np.zeros((0, d))
        layers.append(LayerMemory(
            fg=stack([f.fg[li] for f in feats]),
            bg=stack([f.bg[li] for f in feats]),
            pooled_fg=stack([f.pooled_fg[li][None] for f in feats if f.pooled_fg[li] is not None]),
            pooled_bg=stack([f.pooled_bg[li][None] for f in feats if f.pooled_bg[li] is not None]),
        ))
    return VisualFeatureBank(
        layers=layers,
        support_ids=[s.id for s in supports],
        pooled_fg_ids=[f.support_id for f in feats if not f.empty_fg],
        pooled_bg_ids=[f.support_id for f in feats if not f.empty_bg],
        backend_hash=backend.fingerprint(),
        dim=d,
    )


def visual_score_maps(query: ImageEncoding, bank: VisualFeatureBank, size=None) -> tuple[ScoreMap, ScoreMap]:
    """Per query patch ``(1 + max cosine)/2`` against fg and bg memories, averaged over layers.

    With ``size`` the grids are bilinearly upsampled to pixel resolution.
    """
    if len(query.layer_maps) != len(bank.layers):
        raise ShapeError(f"query has {len(query.layer_maps)} layers, bank has {len(bank.layers)}")
    gh, gw = query.grid_shape
    fg_maps, bg_maps = [], []
    for qmap, mem in zip(query.layer_maps, bank.layers):
        if len(mem.fg) == 0 or len(mem.bg) == 0:
            raise DataError("visual bank layer lacks foreground or background memories")
        q = qmap.reshape(-1, qmap.shape[-1])
        fg_maps.append(((1.0 + cosine_max(q, mem.fg)) / 2.0).reshape(gh, gw))
        bg_maps.append(((1.0 + cosine_max(q, mem.bg)) / 2.0).reshape(gh, gw))
    vf, vb = np.mean(fg_maps, axis=0), np.mean(bg_maps, axis=0)
    if size is not None:
        vf, vb = upsample(vf, size), upsample(vb, size)
    return ScoreMap(np.clip(vf, 0, 1), "visual", "fg"), ScoreMap(np.clip(vb, 0, 1), "visual", "bg")


# --- persistence -------------------------------------------------------------

def save_visual_bank(bank: VisualFeatureBank, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, mem in enumerate(bank.layers):
        layers.append({
            name: _blocks.write_block(directory / f"layer{i}_{name}.f32", getattr(mem, name))
            for name in ("fg", "bg", "pooled_fg", "pooled_bg")
        })
    _blocks.write_meta(directory, {
        "format": BANK_FORMAT,
        "version": BANK_VERSION,
        "backend_hash": bank.backend_hash,
        "dim": bank.dim,
        "support_ids": bank.support_ids,
        "pooled_fg_ids": bank.pooled_fg_ids,
        "pooled_bg_ids": bank.pooled_bg_ids,
        "counts": bank.counts(),
        "layers": layers,
        **({"extra": bank.meta} if bank.meta else {}),
    })
    return directory


def load_visual_bank(directory, backend: Backend | None = None) -> VisualFeatureBank:
    directory = Path(directory)
    meta = _blocks.read_meta(directory)
    if meta.get("format") != BANK_FORMAT:
        raise DataError(f"{directory} is not a visual bank")
    if meta.get("version") != BANK_VERSION:
        raise DataError(f"unsupported visual bank version {meta.get('version')}")
    if backend is not None and backend.fingerprint() != meta["backend_hash"]:
        raise BackendMismatchError(
            f"visual bank in {directory} was built with backend {meta['backend_hash']}, "
            f"current backend is {backend.fingerprint()}"
        )
    layers = [LayerMemory(**{k: _blocks.read_block(directory, v) for k, v in entry.items()})
              for entry in meta["layers"]]
    return VisualFeatureBank(layers, meta["support_ids"], meta["pooled_fg_ids"], meta["pooled_bg_ids"],
                             meta["backend_hash"], meta["dim"], meta.get("extra", {}))
