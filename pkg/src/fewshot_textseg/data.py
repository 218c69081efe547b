"""Image preprocessing, dataset manifests, seeded support selection and a
synthetic glyph-scene generator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import ArgumentError, DataError, FormatError

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGE_SIZE = 640
MASK_THRESHOLD = 128


# --- preprocessing -----------------------------------------------------------

def _as_rgb_float(raw) -> np.ndarray:
    if isinstance(raw, Image.Image):
        if raw.mode != "RGB":
            raise FormatError(f"expected an RGB image, got mode {raw.mode}")
        raw = np.asarray(raw)
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"expected an RGB (H, W, 3) image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if np.issubdtype(arr.dtype, np.integer):
        raise FormatError(f"unsupported integer dtype {arr.dtype}")
    return arr.astype(np.float64)


def _resize(arr: np.ndarray, hw: tuple[int, int], resample) -> np.ndarray:
    h, w = hw
    if arr.shape[:2] == (h, w):
        return arr
    if arr.ndim == 2:
        return np.asarray(Image.fromarray(arr.astype(np.float32), mode="F").resize((w, h), resample),
                          dtype=np.float64)
    return np.stack([_resize(arr[..., c], hw, resample) for c in range(arr.shape[2])], axis=-1)


def fit_long_side(shape: tuple[int, int], size: int = IMAGE_SIZE) -> tuple[int, int]:
    h, w = shape
    scale = size / max(h, w)
    return max(1, round(h * scale)), max(1, round(w * scale))


def _pad_square(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    top, left = (size - h) // 2, (size - w) // 2
    out = np.zeros((size, size) + arr.shape[2:], dtype=arr.dtype)
    out[top:top + h, left:left + w] = arr
    return out


def standardize(image01: np.ndarray) -> np.ndarray:
    return (image01 - np.asarray(CLIP_MEAN)) / np.asarray(CLIP_STD)


def denormalize(image: np.ndarray) -> np.ndarray:
    """Back to [0, 1] RGB, for display."""
    return np.clip(image * np.asarray(CLIP_STD) + np.asarray(CLIP_MEAN), 0.0, 1.0)


def preprocess(raw_image, size: int = IMAGE_SIZE) -> np.ndarray:
    """Scale to [0, 1], resize the long side to ``size``, standardize, zero-pad to a square."""
    img = _as_rgb_float(raw_image)
    img = _resize(img, fit_long_side(img.shape[:2], size), Image.BILINEAR)
    return _pad_square(standardize(img), size)


def binarize_mask(raw_mask) -> np.ndarray:
    """1 where the mask is >= 128; inputs already in {0, 1} pass through unchanged."""
    if isinstance(raw_mask, Image.Image):
        if raw_mask.mode not in ("L", "1", "P", "I", "F"):
            raise FormatError(f"mask must be single-channel, got mode {raw_mask.mode}")
        raw_mask = np.asarray(raw_mask.convert("L") if raw_mask.mode == "P" else raw_mask)
    m = np.asarray(raw_mask)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[..., 0]
    if m.ndim != 2:
        raise FormatError(f"mask must be single-channel, got shape {m.shape}")
    if m.dtype == bool or np.isin(m, (0, 1)).all():
        return m.astype(np.uint8)
    return (m >= MASK_THRESHOLD).astype(np.uint8)


def preprocess_mask(raw_mask, size: int = IMAGE_SIZE) -> np.ndarray:
    m = binarize_mask(raw_mask).astype(np.float64)
    m = _resize(m, fit_long_side(m.shape, size), Image.NEAREST)
    return _pad_square((m >= 0.5).astype(np.uint8), size)


def restore_mask(mask: np.ndarray, original_hw: tuple[int, int], size: int = IMAGE_SIZE) -> np.ndarray:
    """Undo :func:`preprocess` geometry for a (size, size) mask: crop the padding, resize back."""
    h, w = fit_long_side(original_hw, size)
    top, left = (size - h) // 2, (size - w) // 2
    crop = np.asarray(mask, dtype=np.float64)[top:top + h, left:left + w]
    return (_resize(crop, tuple(original_hw), Image.NEAREST) >= 0.5).astype(np.uint8)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return binarize_mask(im.convert("L") if im.mode not in ("L", "1") else im)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((binarize_mask(mask) * 255).astype(np.uint8), mode="L").save(path)


# --- manifests ---------------------------------------------------------------

@dataclass
class SupportSample:
    id: str
    image: np.ndarray  # normalized (H, W, 3)
    mask: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ")


@dataclass
class ManifestEntry:
    id: str
    image: str | np.ndarray  # path, or raw uint8 RGB array for in-memory sets
    mask: str | np.ndarray | None = None


@dataclass
class DatasetManifest:
    name: str
    entries: list[ManifestEntry]
    split: str = "support"
    root: Path | None = None
    seed_table: str | None = None  # path relative to root
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError(f"manifest {self.name} has duplicate ids")
        if self.split not in ("support", "query"):
            raise DataError(f"unknown split {self.split!r}")

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def entry(self, sample_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == sample_id:
                return e
        raise DataError(f"id {sample_id!r} not in manifest {self.name}")

    def _resolve(self, ref):
        if isinstance(ref, np.ndarray):
            return ref
        path = Path(ref)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        if not path.exists():
            raise DataError(f"unresolvable path {path}")
        return path

    def raw_image(self, sample_id: str) -> np.ndarray:
        ref = self._resolve(self.entry(sample_id).image)
        return ref if isinstance(ref, np.ndarray) else read_image(ref)

    def raw_mask(self, sample_id: str) -> np.ndarray | None:
        e = self.entry(sample_id)
        if e.mask is None:
            return None
        ref = self._resolve(e.mask)
        return binarize_mask(ref) if isinstance(ref, np.ndarray) else read_mask(ref)

    def load(self, sample_id: str, size: int = IMAGE_SIZE) -> SupportSample:
        mask = self.raw_mask(sample_id)
        if mask is None:
            raise DataError(f"{sample_id} has no mask")
        return SupportSample(sample_id, preprocess(self.raw_image(sample_id), size), preprocess_mask(mask, size))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    doc = json.loads(path.read_text(encoding="utf-8"))
    entries = [ManifestEntry(str(e["id"]), e["image"], e.get("mask")) for e in doc["entries"]]
    return DatasetManifest(doc.get("name", path.stem), entries, doc.get("split", "support"),
                           root=path.parent, seed_table=doc.get("seed_table"), extras=doc.get("extras", {}))


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    entries = []
    for e in manifest.entries:
        if isinstance(e.image, np.ndarray) or isinstance(e.mask, np.ndarray):
            raise DataError("in-memory entries must be written to disk before saving a manifest")
        entries.append({"id": e.id, "image": str(e.image), "mask": None if e.mask is None else str(e.mask)})
    doc = {"name": manifest.name, "split": manifest.split, "entries": entries}
    if manifest.seed_table:
        doc["seed_table"] = manifest.seed_table
    if manifest.extras:
        doc["extras"] = manifest.extras
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


# --- support selection -------------------------------------------------------

def load_seed_table(path=None) -> dict[int, dict[int, list[str]]]:
    """Seed -> shot count -> support ids. Defaults to the shipped TextSeg table."""
    if path is None:
        text = resources.files("fewshot_textseg.resources").joinpath("textseg_seed_table.json").read_text()
    else:
        text = Path(path).read_text(encoding="utf-8")
    doc = json.loads(text)
    table = doc.get("seeds", doc)
    return {int(s): {int(k): list(ids) for k, ids in row.items()} for s, row in table.items()}


def select_support_ids(manifest: DatasetManifest, k: int, seed: int, seed_table=None) -> list[str]:
    if k < 1:
        raise ArgumentError("k must be >= 1")
    if k > len(manifest):
        raise ArgumentError(f"k={k} exceeds manifest size {len(manifest)}")
    if seed_table is None and manifest.seed_table:
        ref = Path(manifest.seed_table)
        seed_table = load_seed_table(ref if ref.is_absolute() or manifest.root is None else manifest.root / ref)
    if seed_table and k in seed_table.get(seed, {}):
        ids = list(seed_table[seed][k])
        missing = [i for i in ids if i not in set(manifest.ids)]
        if missing:
            raise DataError(f"seed table ids not in manifest: {missing}")
        return ids
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(len(manifest), size=k, replace=False))
    return [manifest.entries[i].id for i in picked]


def select_support(manifest: DatasetManifest, k: int, seed: int, seed_table=None,
                   size: int = IMAGE_SIZE) -> list[SupportSample]:
    return [manifest.load(i, size) for i in select_support_ids(manifest, k, seed, seed_table)]


# --- synthetic glyph scenes --------------------------------------------------

GLYPH_PALETTE = {
    "red": (225, 30, 35),
    "green": (30, 190, 60),
    "blue": (35, 70, 225),
    "yellow": (250, 215, 20),
    "white": (245, 245, 245),
    "black": (12, 12, 12),
}
BACKGROUND_PALETTE = (
    (128, 104, 84), (92, 118, 140), (150, 138, 112), (104, 112, 92),
    (168, 150, 160), (76, 84, 100), (140, 120, 96), (112, 132, 124),
)
BACKGROUND_KINDS = ("flat", "gradient", "noise")


@dataclass
class SynthConfig:
    canvas: int = IMAGE_SIZE
    glyph_count: tuple[int, int] = (3, 6)
    glyph_size: tuple[int, int] | None = None  # None: (90, 180) scaled to the canvas
    palette: dict = field(default_factory=lambda: dict(GLYPH_PALETTE))
    background: str = "mixed"  # flat | gradient | noise | mixed
    background_palette: Sequence = BACKGROUND_PALETTE
    noise_std: float = 14.0
    seed: int = 0
    patch: int = 16

    def __post_init__(self):
        if self.canvas % self.patch:
            raise ArgumentError(f"canvas {self.canvas} not divisible by patch {self.patch}")
        if self.glyph_size is None:
            scale = self.canvas / IMAGE_SIZE
            lo = max(self.patch, round(90 * scale))
            self.glyph_size = (lo, max(lo, round(180 * scale)))
        if self.background not in BACKGROUND_KINDS + ("mixed",):
            raise ArgumentError(f"unknown background kind {self.background!r}")
        lo, hi = self.glyph_count
        if lo < 0 or hi < lo:
            raise ArgumentError("glyph_count must be an increasing non-negative range")
        if self.glyph_count[1] > 0 and self.canvas < self.glyph_size[0]:
            raise ArgumentError("canvas is smaller than one glyph")


@dataclass
class Glyph:
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    color: str
    shape: str


@dataclass
class SynthImage:
    id: str
    image: np.ndarray  # uint8 RGB
    mask: np.ndarray  # uint8 {0, 1}
    glyphs: list[Glyph]
    background: str

    def description(self) -> dict:
        """Fine-grained attribute description in the lexicon file grammar."""
        colors = sorted({g.color for g in self.glyphs}) or ["no"]
        h, w = self.mask.shape
        ys, xs = np.nonzero(self.mask)
        if len(ys):
            cy, cx = ys.mean() / h, xs.mean() / w
            vert = "top" if cy < 0.4 else "bottom" if cy > 0.6 else "center"
            horiz = "left" if cx < 0.4 else "right" if cx > 0.6 else "center"
            if vert == horiz == "center":
                position = "in the center"
            else:
                position = f"at the {vert}" if vert != "center" else f"on the {horiz}"
        else:
            position = "in the center"
        return {
            "fg": {"color": " and ".join(colors), "style": "bold thick", "position": position},
            "bg": {"proximal": f"{self.background} wall", "distal": f"{self.background} texture"},
        }


_STROKE_SHAPES = ("bar", "ell", "tee", "eich", "ring", "zed")


def _glyph_polygons(shape: str, x0: int, y0: int, w: int, h: int, t: int) -> list[list[tuple[int, int]]]:
    """Rectilinear stroke polygons inside the box, stroke thickness ``t``."""
    def rect(ax, ay, bx, by):
        return [(x0 + ax, y0 + ay), (x0 + bx - 1, y0 + ay), (x0 + bx - 1, y0 + by - 1), (x0 + ax, y0 + by - 1)]
    if shape == "bar":
        return [rect(0, 0, w, t)] if w >= h else [rect(0, 0, t, h)]
    if shape == "ell":
        return [rect(0, 0, t, h), rect(0, h - t, w, h)]
    if shape == "tee":
        return [rect(0, 0, w, t), rect((w - t) // 2, 0, (w + t) // 2, h)]
    if shape == "eich":
        return [rect(0, 0, t, h), rect(w - t, 0, w, h), rect(0, (h - t) // 2, w, (h + t) // 2)]
    if shape == "ring":
        return [rect(0, 0, w, t), rect(0, h - t, w, h), rect(0, 0, t, h), rect(w - t, 0, w, h)]
    if shape == "zed":
        return [rect(0, 0, w, t), rect(0, h - t, w, h), rect((w - t) // 2, 0, (w + t) // 2, h)]
    raise ArgumentError(f"unknown glyph shape {shape}")


def _background(kind: str, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.canvas
    bgp = np.asarray(cfg.background_palette, dtype=np.float64)
    c0 = bgp[rng.integers(len(bgp))]
    if kind == "flat":
        img = np.broadcast_to(c0, (n, n, 3)).copy()
    elif kind == "gradient":
        c1 = bgp[rng.integers(len(bgp))]
        t = np.linspace(0.0, 1.0, n)
        ramp = t[:, None] if rng.integers(2) else t[None, :]
        ramp = np.broadcast_to(ramp, (n, n))[..., None]
        img = c0 * (1 - ramp) + c1 * ramp
    else:
        img = c0 + rng.normal(0.0, cfg.noise_std, size=(n, n, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_glyph_image(cfg: SynthConfig, rng: np.random.Generator, image_id: str) -> SynthImage:
    kind = cfg.background
    if kind == "mixed":
        kind = BACKGROUND_KINDS[rng.integers(len(BACKGROUND_KINDS))]
    img = _background(kind, cfg, rng)
    mask = np.zeros((cfg.canvas, cfg.canvas), dtype=np.uint8)
    names = list(cfg.palette)
    glyphs = []
    n_glyphs = int(rng.integers(cfg.glyph_count[0], cfg.glyph_count[1] + 1))
    lo, hi = cfg.glyph_size
    for _ in range(n_glyphs):
        w = int(rng.integers(lo, min(hi, cfg.canvas) + 1))
        h = int(rng.integers(lo, min(hi, cfg.canvas) + 1))
        x0 = int(rng.integers(0, cfg.canvas - w + 1))
        y0 = int(rng.integers(0, cfg.canvas - h + 1))
        t = max(2, int(round(min(w, h) * rng.uniform(0.28, 0.4))))
        shape = _STROKE_SHAPES[rng.integers(len(_STROKE_SHAPES))]
        color = names[rng.integers(len(names))]
        layer = Image.new("L", (cfg.canvas, cfg.canvas), 0)
        draw = ImageDraw.Draw(layer)
        for poly in _glyph_polygons(shape, x0, y0, w, h, t):
            draw.polygon(poly, fill=1)
        gm = np.asarray(layer, dtype=bool)
        img[gm] = cfg.palette[color]
        mask[gm] = 1
        glyphs.append(Glyph((x0, y0, x0 + w, y0 + h), color, shape))
    _enforce_separability(img, mask, cfg.palette.values())
    return SynthImage(image_id, img, mask, glyphs, kind)


def _enforce_separability(img: np.ndarray, mask: np.ndarray, palette) -> None:
    # A background pixel may not carry an exact palette colour.
    bg = mask == 0
    for color in palette:
        hit = bg & np.all(img == np.asarray(color, dtype=np.uint8), axis=-1)
        if hit.any():
            img[hit, 0] = np.where(img[hit, 0] < 255, img[hit, 0] + 1, 254)


def synth_generate(cfg: SynthConfig, n_images: int = 1, prefix: str = "synth",
                   split: str = "support") -> tuple[DatasetManifest, list[np.ndarray]]:
    """In-memory synthetic set. Returns the manifest and its ground-truth masks."""
    rng = np.random.default_rng(cfg.seed)
    items = [render_glyph_image(cfg, rng, f"{prefix}{i:04d}") for i in range(n_images)]
    entries = [ManifestEntry(it.id, it.image, it.mask) for it in items]
    descriptions = {it.id: it.description() for it in items}
    manifest = DatasetManifest(prefix, entries, split, extras={"descriptions": descriptions})
    return manifest, [it.mask for it in items]


def write_synth(manifest: DatasetManifest, out_dir) -> Path:
    """Write an in-memory set as PNG image/mask pairs plus ``manifest.json``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for e in manifest.entries:
        img_rel, mask_rel = f"images/{e.id}.png", f"masks/{e.id}.png"
        Image.fromarray(np.asarray(e.image, dtype=np.uint8), mode="RGB").save(out_dir / img_rel)
        write_mask(out_dir / mask_rel, e.mask)
        entries.append(ManifestEntry(e.id, img_rel, mask_rel))
    on_disk = DatasetManifest(manifest.name, entries, manifest.split, root=out_dir, extras=manifest.extras)
    return save_manifest(on_disk, out_dir / "manifest.json")


@dataclass
class ToySuite:
    support: DatasetManifest
    query: DatasetManifest
    query_masks: list[np.ndarray]


def make_toy_suite(seed: int = 0, n_support: int = 8, n_query: int = 20, background: str = "mixed",
                   canvas: int = IMAGE_SIZE, patch: int = 16, **overrides) -> ToySuite:
    """Support pool and query set drawn from disjoint seeded streams."""
    sup_cfg = SynthConfig(canvas=canvas, background=background, seed=10_000 + seed, patch=patch, **overrides)
    qry_cfg = SynthConfig(canvas=canvas, background=background, seed=20_000 + seed, patch=patch, **overrides)
    support, _ = synth_generate(sup_cfg, n_support, prefix="s", split="support")
    query, masks = synth_generate(qry_cfg, n_query, prefix="q", split="query")
    return ToySuite(support, query, masks)
