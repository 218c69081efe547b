"""Query-time scoring: prompt score maps, background suppression, fusion and
mask generation."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .afa import PromptFeatureBank
from .backend import Backend, ImageEncoding
from .errors import ArgumentError, ShapeError
from .maps import ScoreMap, as_grid, cosine_max, upsample
from .visual_bank import VisualFeatureBank, visual_score_maps


@dataclass
class MaskGenConfig:
    threshold: float = 0.10  # calibrated on the toy suite; fused scores stay below 0.5
    edge_filter: bool = True
    min_component_area: int = 16
    edge_dilation: int = 2
    canny_sigma: float = 1.0
    canny_low: float = 0.1  # fraction of the maximum gradient magnitude
    canny_high: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ArgumentError("threshold must lie in (0, 1)")
        if not 0.0 < self.canny_low < self.canny_high:
            raise ArgumentError("need 0 < canny_low < canny_high")


@dataclass
class InferenceConfig:
    branches: str = "both"  # both | visual | prompt
    suppression: bool = True
    harmonic_factor2: bool = False
    tau: float | None = None
    prompt_layer: int = -1
    mask: MaskGenConfig = field(default_factory=MaskGenConfig)

    def __post_init__(self):
        if self.branches not in ("both", "visual", "prompt"):
            raise ArgumentError(f"unknown branch selection {self.branches!r}")
        if isinstance(self.mask, dict):
            self.mask = MaskGenConfig(**self.mask)


def _wrap(like, grid, source, polarity):
    return ScoreMap(grid, source, polarity) if isinstance(like, ScoreMap) else grid


def prompt_score_maps(query: ImageEncoding, prompt_bank: PromptFeatureBank, tau: float,
                      layer: int = -1, size=None) -> tuple[ScoreMap, ScoreMap]:
    """Two-class softmax of the best fg and bg prompt similarity per patch."""
    if tau <= 0:
        raise ArgumentError("tau must be positive")
    if len(prompt_bank.fg_features) == 0 or len(prompt_bank.bg_features) == 0:
        raise ArgumentError("prompt bank is empty")
    qmap = query.layer_maps[layer]
    gh, gw, d = qmap.shape
    q = qmap.reshape(-1, d)
    s_f = cosine_max(q, prompt_bank.fg_features)
    s_b = cosine_max(q, prompt_bank.bg_features)
    # softmax over (s_f, s_b) / tau == sigmoid((s_f - s_b) / tau)
    p_f = 0.5 * (1.0 + np.tanh((s_f - s_b) / (2.0 * tau)))
    p_f = p_f.reshape(gh, gw)
    p_b = 1.0 - p_f
    if size is not None:
        p_f, p_b = upsample(p_f, size), upsample(p_b, size)
    return ScoreMap(p_f, "prompt", "fg"), ScoreMap(p_b, "prompt", "bg")


def suppress(fg_map, bg_map):
    """Cellwise ``fg * (1 - bg)``."""
    f, b = as_grid(fg_map), as_grid(bg_map)
    if f.shape != b.shape:
        raise ShapeError(f"shape mismatch {f.shape} vs {b.shape}")
    src = fg_map.source if isinstance(fg_map, ScoreMap) else None
    return _wrap(fg_map, f * (1.0 - b), src, "fg")


def fuse(v_map, p_map, factor2: bool = False):
    """Cellwise ``V*P / (V+P)`` (0 where both are 0); ``factor2`` gives the usual harmonic mean."""
    v, p = as_grid(v_map), as_grid(p_map)
    if v.shape != p.shape:
        raise ShapeError(f"shape mismatch {v.shape} vs {p.shape}")
    s = v + p
    out = np.divide(v * p, s, out=np.zeros_like(s), where=s > 0)
    if factor2:
        out = 2.0 * out
    return _wrap(v_map, out, "fused", "fg")


# --- edges and masks ---------------------------------------------------------

def _nonmax_suppress(mag, gy, gx):
    """Keep pixels that are maximal along the gradient direction.

    Neighbour magnitudes are linearly interpolated between the two pixels the
    gradient ray passes. Ties keep the pixel on the positive side only, so an
    exact step yields a one-pixel line.
    """
    h, w = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    pad = np.pad(mag, 1)
    ax, ay = np.abs(gx), np.abs(gy)
    same = (gx * gy) >= 0  # gradient in quadrants I/III (image coordinates)

    def at(dy, dx):
        return pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    with np.errstate(divide="ignore", invalid="ignore"):
        # mostly vertical gradient: interpolate between the vertical and a diagonal neighbour
        wv = np.where(ay > 0, ax / ay, 0.0)
        wh = np.where(ax > 0, ay / ax, 0.0)
    candidates = []
    for mostly_vertical in (True, False):
        sel = (ay >= ax) if mostly_vertical else (ax > ay)
        for quad in (True, False):
            region = sel & (same if quad else ~same)
            if not region.any():
                continue
            d = 1 if quad else -1
            if mostly_vertical:
                fwd = (1 - wv) * at(1, 0) + wv * at(1, d)
                bwd = (1 - wv) * at(-1, 0) + wv * at(-1, -d)
            else:
                fwd = (1 - wh) * at(0, 1) + wh * at(d, 1)
                bwd = (1 - wh) * at(0, -1) + wh * at(-d, -1)
            candidates.append(region & (mag > fwd) & (mag >= bwd))
    for c in candidates:
        keep |= c
    return keep


def canny_edges(image: np.ndarray, sigma: float = 1.0, low: float = 0.1, high: float = 0.3,
                absolute: bool = False) -> np.ndarray:
    """Canny edge map of a (H, W) or (H, W, 3) image.

    Colour images use, per pixel, the gradient of the channel with the
    largest magnitude.

    ``low``/``high`` are fractions of the maximum gradient magnitude unless
    ``absolute`` is set.
    """
    img = np.asarray(image, dtype=np.float64)
    chans = img[..., None] if img.ndim == 2 else img
    gx = np.empty(chans.shape)
    gy = np.empty(chans.shape)
    for c in range(chans.shape[-1]):
        smooth = ndi.gaussian_filter(chans[..., c], sigma, mode="nearest", truncate=4.0)
        gx[..., c] = ndi.sobel(smooth, axis=1)
        gy[..., c] = ndi.sobel(smooth, axis=0)
    # colour input: take the gradient of whichever channel changes most
    pick = np.argmax(gx * gx + gy * gy, axis=-1)[..., None]
    gx = np.take_along_axis(gx, pick, axis=-1)[..., 0]
    gy = np.take_along_axis(gy, pick, axis=-1)[..., 0]
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(mag.shape, dtype=bool)
    lo, hi = (low, high) if absolute else (low * peak, high * peak)
    thin = _nonmax_suppress(mag, gy, gx)
    thin[0, :] = thin[-1, :] = thin[:, 0] = thin[:, -1] = False
    weak = thin & (mag >= lo)
    labels, n = ndi.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return weak
    strong_labels = np.unique(labels[weak & (mag >= hi)])
    good = np.zeros(n + 1, dtype=bool)
    good[strong_labels] = True
    good[0] = False
    return good[labels]


def _disk(radius: int) -> np.ndarray:
    y, x = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    return x * x + y * y <= radius * radius


def generate_mask(score, edges: np.ndarray | None, cfg: MaskGenConfig) -> np.ndarray:
    """Threshold, keep 8-connected components of sufficient area and, with the
    edge filter on, only those whose dilated boundary touches an edge pixel."""
    s = as_grid(score)
    fg = s >= cfg.threshold
    labels, n = ndi.label(fg, structure=np.ones((3, 3), dtype=bool))
    out = np.zeros(s.shape, dtype=np.uint8)
    if n == 0:
        return out
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    r = cfg.edge_dilation
    foot = _disk(r) if r > 0 else np.ones((1, 1), dtype=bool)
    use_edges = cfg.edge_filter and edges is not None
    for idx, sl in enumerate(ndi.find_objects(labels), start=1):
        if sl is None or areas[idx] < cfg.min_component_area:
            continue
        if use_edges:
            ys = slice(max(sl[0].start - r - 1, 0), sl[0].stop + r + 1)
            xs = slice(max(sl[1].start - r - 1, 0), sl[1].stop + r + 1)
            comp = labels[ys, xs] == idx
            boundary = comp & ~ndi.binary_erosion(comp, structure=np.ones((3, 3)), border_value=0)
            ring = ndi.binary_dilation(boundary, structure=foot)
            if not (ring & edges[ys, xs]).any():
                continue
        out[labels == idx] = 1
    return out


# --- full pipeline -----------------------------------------------------------

@dataclass
class FusedResult:
    S: np.ndarray
    V_f: np.ndarray | None
    V_b: np.ndarray | None
    P_f: np.ndarray | None
    P_b: np.ndarray | None
    V_f_suppressed: np.ndarray | None
    P_f_suppressed: np.ndarray | None
    mask: np.ndarray
    edges: np.ndarray

    def maps(self) -> dict[str, np.ndarray]:
        names = ("S", "V_f", "V_b", "P_f", "P_b", "V_f_suppressed", "P_f_suppressed")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, mask=self.mask, edges=self.edges, **self.maps())
        return buf.getvalue()


def segment(query_image: np.ndarray, visual_bank: VisualFeatureBank | None, prompt_bank: PromptFeatureBank | None,
            backend: Backend, cfg: InferenceConfig | None = None) -> FusedResult:
    cfg = cfg or InferenceConfig()
    size = query_image.shape[:2]
    enc = backend.encode_image(query_image)
    tau = cfg.tau or backend.descriptor.temperature
    v_f = v_b = p_f = p_b = v_s = p_s = None
    if cfg.branches in ("both", "visual"):
        v_f, v_b = (m.grid for m in visual_score_maps(enc, visual_bank, size))
        v_s = suppress(v_f, v_b) if cfg.suppression else v_f
    if cfg.branches in ("both", "prompt"):
        p_f, p_b = (m.grid for m in prompt_score_maps(enc, prompt_bank, tau, cfg.prompt_layer, size))
        p_s = suppress(p_f, p_b) if cfg.suppression else p_f
    # a single branch is fused with itself so S stays on the same scale
    s = fuse(v_s if v_s is not None else p_s, p_s if p_s is not None else v_s, cfg.harmonic_factor2)
    edges = canny_edges(query_image, cfg.mask.canny_sigma, cfg.mask.canny_low, cfg.mask.canny_high)
    mask = generate_mask(s, edges, cfg.mask)
    return FusedResult(s, v_f, v_b, p_f, p_b, v_s, p_s, mask, edges)
