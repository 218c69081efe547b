"""Encoder backends.

A backend bundles a word tokenizer, a frozen token-embedding table, a
differentiable text encoder and a patch-grid image encoder. Downstream code
only talks to the :class:`Backend` surface, so a pretrained vision-language
model can be dropped in through :func:`register_backend_kind`.

The shipped :class:`ToyBackend` is small, deterministic and has exact
autograd gradients, which is what the test-suite runs against.
"""
from __future__ import annotations

import hashlib
import json
import re
import zlib
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import _blocks
from .errors import (
    ArgumentError,
    CapabilityError,
    ConfigurationError,
    DataError,
    NumericError,
    ShapeError,
    TokenOverflowError,
)

START_TOKEN = "<start>"
END_TOKEN = "<end>"
LEARN_TOKEN = "<learn>"
SPECIAL_TOKENS = (START_TOKEN, END_TOKEN, LEARN_TOKEN)

# Word list of the toy vocabulary. Anything else is hashed into a bucket range.
BASE_WORDS = (
    "a an the photo picture image of with without and or in on at to from by for "
    "text word words letter letters character characters sign logo title caption "
    "black white red green blue yellow orange purple pink brown gray grey golden "
    "silver dark light bright pale colorful "
    "bold italic cursive handwritten serif sans regular thin thick outlined shadowed "
    "decorative artistic printed painted neon stylized curved straight rotated "
    "center centre top bottom left right middle corner edge side upper lower "
    "large small huge tiny big long wide narrow "
    "banner poster wall board signboard billboard panel sheet paper cover label "
    "shirt box screen window door shop store "
    "buildings building sky trees tree street road city mountains clouds water "
    "crowd people grass field background scene surface texture pattern noise "
    "gradient flat plain"
).split()

_WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]")


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    learnable_mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.learnable_mask):
            raise ArgumentError("ids and learnable_mask differ in length")

    def __len__(self):
        return len(self.ids)

    @property
    def n_learnable(self) -> int:
        return sum(self.learnable_mask)

    def learnable_positions(self) -> list[int]:
        return [i for i, m in enumerate(self.learnable_mask) if m]


@dataclass
class ImageEncoding:
    layer_maps: list[np.ndarray]  # each (grid_h, grid_w, dim), rows unit-norm
    pooled: np.ndarray  # (dim,)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.layer_maps[0].shape[:2]


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    feature_dim: int
    embed_dim: int
    context_length: int
    patch_size: int
    tapped_layer_indices: tuple[int, ...]
    temperature: float = 0.01
    supports_text_gradients: bool = True
    image_size: int = 640

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        idx = tuple(self.tapped_layer_indices)
        if not idx or any(b <= a for a, b in zip(idx, idx[1:])) or idx[0] < 0:
            raise ConfigurationError("tapped_layer_indices must be strictly increasing and non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tapped_layer_indices"] = list(self.tapped_layer_indices)
        return d


class WordTokenizer:
    """Lower-cased word tokenizer with a fixed vocabulary and hashed OOV buckets."""

    def __init__(self, words: Sequence[str] = BASE_WORDS, n_buckets: int = 1024, context_length: int = 77):
        vocab = list(SPECIAL_TOKENS)
        for w in words:
            if w not in vocab:
                vocab.append(w)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.n_buckets = n_buckets
        self.context_length = context_length

    @property
    def size(self) -> int:
        return len(self.vocab) + self.n_buckets

    @property
    def start_id(self) -> int:
        return self.index[START_TOKEN]

    @property
    def end_id(self) -> int:
        return self.index[END_TOKEN]

    @property
    def learn_id(self) -> int:
        return self.index[LEARN_TOKEN]

    def word_id(self, word: str) -> int:
        if word in self.index and word not in SPECIAL_TOKENS:
            return self.index[word]
        return len(self.vocab) + zlib.crc32(word.encode("utf-8")) % self.n_buckets

    def words(self, text: str) -> list[str]:
        return _WORD_RE.findall(text.lower())

    def encode_words(self, text: str) -> list[int]:
        return [self.word_id(w) for w in self.words(text)]

    def tokenize(self, text: str) -> TokenSequence:
        ids = [self.start_id, *self.encode_words(text), self.end_id]
        if len(ids) > self.context_length:
            raise TokenOverflowError(
                f"{len(ids)} tokens exceed context length {self.context_length}"
            )
        return TokenSequence(tuple(ids), (False,) * len(ids))

    def detokenize(self, seq: TokenSequence) -> str:
        out = []
        for i in seq.ids:
            if i in (self.start_id, self.end_id):
                continue
            if i < len(self.vocab):
                out.append(self.vocab[i])
            else:
                out.append(f"<oov{i - len(self.vocab)}>")
        return " ".join(out)


class Backend(ABC):
    """Encoder contract every downstream module is written against."""

    descriptor: BackendDescriptor
    tokenizer: WordTokenizer

    def tokenize(self, text: str) -> TokenSequence:
        return self.tokenizer.tokenize(text)

    def detokenize(self, seq: TokenSequence) -> str:
        return self.tokenizer.detokenize(seq)

    @property
    @abstractmethod
    def token_table(self) -> torch.Tensor:
        """Frozen (vocab, embed_dim) table."""

    def embed_tokens(self, seq: TokenSequence, params: torch.Tensor | None = None) -> torch.Tensor:
        """Look up fixed tokens and splice ``params`` rows into learnable slots.

        ``params`` rows are used by reference, in order of the learnable
        positions, so gradients reach them.
        """
        positions = seq.learnable_positions()
        n = len(positions)
        if n and (params is None or params.shape[0] != n):
            got = 0 if params is None else params.shape[0]
            raise ConfigurationError(f"sequence has {n} learnable slots but {got} parameter rows")
        out = self.token_table[torch.tensor(seq.ids, dtype=torch.long)]
        if n:
            out = out.clone()
            out[torch.tensor(positions, dtype=torch.long)] = params.to(out.dtype)
        return out

    @abstractmethod
    def encode_text(self, embeds: torch.Tensor) -> torch.Tensor:
        """(L, E) -> unit (D,), or (B, L, E) -> (B, D)."""

    @abstractmethod
    def encode_image(self, image: np.ndarray) -> ImageEncoding:
        """Normalized (H, W, 3) image -> per-layer patch feature grids."""

    @abstractmethod
    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter tensor, for hashing and serialization."""

    def encode_prompt(self, seq: TokenSequence, params=None) -> torch.Tensor:
        return self.encode_text(self.embed_tokens(seq, params))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.descriptor.to_dict(), sort_keys=True).encode())
        h.update(json.dumps(self.tokenizer.vocab).encode())
        for name, arr in sorted(self.state_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


# Colour anchors for the toy patch statistics: a 3x3x3 grid over raw RGB,
# expressed in normalized space. Width is 0.2 in raw units.
_ANCHOR_LEVELS = (0.15, 0.5, 0.85)
_MEAN_FOR_ANCHORS = (0.48145466, 0.4578275, 0.40821073)
_STD_FOR_ANCHORS = (0.26862954, 0.26130258, 0.27577711)
_ANCHOR_WIDTH = 0.2 / float(np.mean(_STD_FOR_ANCHORS))


def _default_anchors(mean, std) -> np.ndarray:
    grid = np.array(np.meshgrid(_ANCHOR_LEVELS, _ANCHOR_LEVELS, _ANCHOR_LEVELS, indexing="ij"))
    raw = grid.reshape(3, -1).T
    return (raw - np.asarray(mean)) / np.asarray(std)


class ToyBackend(Backend):
    """Seeded linear stand-in for a vision-language encoder pair.

    Text: ``normalize(W_text @ mean(token embeddings))``.
    Image: per patch, a statistics vector (channel means, channel stds and
    soft colour-anchor occupancies, each offset so an all-zero patch gives a
    zero vector) is mapped by one affine projection per layer and
    L2-normalized. An all-zero image therefore encodes to ``normalize(bias_l)``
    in every cell of layer ``l``.
    """

    def __init__(self, descriptor: BackendDescriptor, arrays: dict[str, np.ndarray],
                 tokenizer: WordTokenizer | None = None, seed: int | None = None):
        self.descriptor = descriptor
        self.tokenizer = tokenizer or WordTokenizer(context_length=descriptor.context_length)
        self.seed = seed
        self._arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        for arr in self._arrays.values():
            arr.setflags(write=False)
        self._table = torch.from_numpy(self._arrays["token_table"].copy())
        self._text_proj = torch.from_numpy(self._arrays["text_proj"].copy())
        n_layers = len(descriptor.tapped_layer_indices)
        self._img_proj = [self._arrays[f"img_proj_{i}"] for i in range(n_layers)]
        self._img_bias = [self._arrays[f"img_bias_{i}"] for i in range(n_layers)]
        self._anchors = self._arrays["anchors"]
        if self._table.shape[0] != self.tokenizer.size:
            raise ConfigurationError("token table does not match tokenizer size")

    @property
    def token_table(self) -> torch.Tensor:
        return self._table

    def state_arrays(self) -> dict[str, np.ndarray]:
        return dict(self._arrays)

    def encode_text(self, embeds: torch.Tensor) -> torch.Tensor:
        if embeds.shape[-2] > self.descriptor.context_length:
            raise TokenOverflowError("sequence longer than context length")
        if not torch.isfinite(embeds).all():
            raise NumericError("non-finite token embeddings")
        pooled = embeds.mean(dim=-2)
        out = pooled @ self._text_proj.T
        return out / out.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def patch_statistics(self, image: np.ndarray) -> np.ndarray:
        """(grid_h, grid_w, 6 + n_anchors) statistics, zero for an all-zero patch."""
        p = self.descriptor.patch_size
        h, w = image.shape[:2]
        gh, gw = h // p, w // p
        patches = image.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4).reshape(gh, gw, p * p, 3)
        mean = patches.mean(axis=2)
        std = patches.std(axis=2)
        a = self._anchors
        a_sq = (a ** 2).sum(axis=1)
        inv = 1.0 / (2.0 * _ANCHOR_WIDTH ** 2)
        base = np.exp(-inv * a_sq)
        occ = np.empty((gh, gw, a.shape[0]))
        for r in range(gh):
            row = patches[r]  # (gw, p*p, 3)
            d2 = (row ** 2).sum(-1)[..., None] - 2.0 * row @ a.T + a_sq
            occ[r] = np.exp(-inv * d2).mean(axis=1)
        return np.concatenate([mean, std, occ - base], axis=-1)

    def encode_image(self, image: np.ndarray) -> ImageEncoding:
        image = np.asarray(image, dtype=np.float64)
        p = self.descriptor.patch_size
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
        h, w = image.shape[:2]
        if h < p or w < p or h % p or w % p:
            raise ShapeError(f"image size {h}x{w} is not a multiple of patch size {p}")
        if not np.isfinite(image).all():
            raise NumericError("non-finite image values")
        stats = self.patch_statistics(image)
        maps = [_normalize_rows(stats @ W.T + b) for W, b in zip(self._img_proj, self._img_bias)]
        pooled = maps[-1].reshape(-1, maps[-1].shape[-1]).mean(axis=0)
        return ImageEncoding(layer_maps=maps, pooled=_normalize_rows(pooled))


# Colour words whose toy embeddings are tied to the image feature of a solid
# patch, so hand-written foreground prompts carry visual meaning. Everything
# else, scene nouns included, stays random. Raw RGB in [0, 1].
GROUNDED_COLORS = {
    "red": (0.88, 0.12, 0.14), "green": (0.12, 0.75, 0.24), "blue": (0.14, 0.27, 0.88),
    "yellow": (0.98, 0.84, 0.08), "white": (0.96, 0.96, 0.96), "black": (0.05, 0.05, 0.05),
    "orange": (0.95, 0.55, 0.1), "purple": (0.55, 0.2, 0.7), "pink": (0.95, 0.6, 0.75),
}


def _solid_patch(rgb, patch: int) -> np.ndarray:
    raw = np.broadcast_to(np.asarray(rgb, dtype=np.float64), (patch, patch, 3))
    return (raw - np.asarray(_MEAN_FOR_ANCHORS)) / np.asarray(_STD_FOR_ANCHORS)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(max(rows, cols), min(rows, cols))))
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def make_toy_backend(seed: int = 0, dim: int = 64, patch: int = 16, *, embed_dim: int | None = None,
                     image_size: int = 640, temperature: float = 0.01, context_length: int = 77,
                     token_scale: float = 0.02, bias_scale: float = 2.0, n_buckets: int = 1024,
                     grounding: float = 3.0) -> ToyBackend:
    """Seeded toy backend.

    ``grounding`` is the embedding norm given to colour words; their text
    features then point at the last-layer feature of a solid patch of that
    colour. Zero disables it and leaves every word random.
    """
    if dim < 8:
        raise ArgumentError("toy backend needs dim >= 8")
    if patch < 1 or image_size % patch:
        raise ArgumentError(f"patch {patch} does not divide image size {image_size}")
    embed_dim = embed_dim or dim
    tokenizer = WordTokenizer(n_buckets=n_buckets, context_length=context_length)
    rng = np.random.default_rng(seed)
    anchors = _default_anchors(_MEAN_FOR_ANCHORS, _STD_FOR_ANCHORS)
    n_stats = 6 + anchors.shape[0]
    arrays = {
        "token_table": rng.normal(0.0, token_scale, size=(tokenizer.size, embed_dim)),
        "text_proj": _orthogonal(rng, dim, embed_dim),
        "anchors": anchors,
    }
    for i in range(2):
        arrays[f"img_proj_{i}"] = rng.normal(0.0, 1.0 / np.sqrt(n_stats), size=(dim, n_stats))
        arrays[f"img_bias_{i}"] = rng.normal(0.0, bias_scale / np.sqrt(dim), size=dim)
    descriptor = BackendDescriptor(
        name="toy", feature_dim=dim, embed_dim=embed_dim, context_length=context_length,
        patch_size=patch, tapped_layer_indices=(0, 1), temperature=temperature,
        supports_text_gradients=True, image_size=image_size,
    )
    if grounding > 0:
        probe = ToyBackend(descriptor, arrays, tokenizer)
        pinv = np.linalg.pinv(arrays["text_proj"])
        for word, rgb in GROUNDED_COLORS.items():
            feat = probe.encode_image(_solid_patch(rgb, patch)).layer_maps[-1][0, 0]
            arrays["token_table"][tokenizer.index[word]] = grounding * (pinv @ feat)
    return ToyBackend(descriptor, arrays, tokenizer, seed=seed)


# --- persistence -------------------------------------------------------------

BACKEND_FORMAT = "fewshot-textseg/backend"
BACKEND_VERSION = 1

_LOADERS: dict[str, Callable[[Path, dict], Backend]] = {}


def register_backend_kind(kind: str, loader: Callable[[Path, dict], Backend]) -> None:
    """Hook for pretrained adapters: ``loader(weight_dir, meta) -> Backend``."""
    _LOADERS[kind] = loader


def save_backend(backend: Backend, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {name: _blocks.write_block(directory / f"{name}.f32", arr)
               for name, arr in sorted(backend.state_arrays().items())}
    meta = {
        "format": BACKEND_FORMAT,
        "version": BACKEND_VERSION,
        "kind": type(backend).__name__.replace("Backend", "").lower() or "custom",
        "descriptor": backend.descriptor.to_dict(),
        "vocab": backend.tokenizer.vocab,
        "n_buckets": backend.tokenizer.n_buckets,
        "seed": getattr(backend, "seed", None),
        "tensors": tensors,
    }
    _blocks.write_meta(directory, meta)
    return directory


def _load_toy(directory: Path, meta: dict) -> ToyBackend:
    desc = dict(meta["descriptor"])
    desc["tapped_layer_indices"] = tuple(desc["tapped_layer_indices"])
    descriptor = BackendDescriptor(**desc)
    words = [w for w in meta["vocab"] if w not in SPECIAL_TOKENS]
    tokenizer = WordTokenizer(words, n_buckets=meta["n_buckets"], context_length=descriptor.context_length)
    arrays = {name: _blocks.read_block(directory, entry) for name, entry in meta["tensors"].items()}
    return ToyBackend(descriptor, arrays, tokenizer, seed=meta.get("seed"))


register_backend_kind("toy", _load_toy)


def load_backend(directory) -> Backend:
    directory = Path(directory)
    meta = _blocks.read_meta(directory)
    if meta.get("format") != BACKEND_FORMAT:
        raise DataError(f"{directory} is not a backend weight directory")
    kind = meta.get("kind")
    if kind not in _LOADERS:
        raise CapabilityError(f"no adapter registered for backend kind {kind!r}")
    return _LOADERS[kind](directory, meta)


def resolve_backend(spec: str | dict | None) -> Backend:
    """Build a backend from ``"toy"``, ``"toy:seed=1,dim=32"``, a dict, or a weight directory."""
    if spec is None:
        spec = "toy"
    if isinstance(spec, dict):
        spec = dict(spec)
        kind = spec.pop("kind", "toy")
        if kind != "toy":
            raise CapabilityError(f"unknown backend kind {kind!r}")
    elif spec == "toy" or spec.startswith("toy:"):
        kwargs = {}
        if ":" in spec:
            for part in spec.split(":", 1)[1].split(","):
                if not part:
                    continue
                key, _, value = part.partition("=")
                try:
                    kwargs[key.strip()] = float(value) if "." in value else int(value)
                except ValueError as exc:
                    raise ArgumentError(f"bad backend option {part!r}") from exc
        spec = kwargs
    if isinstance(spec, dict):
        try:
            return make_toy_backend(**spec)
        except TypeError as exc:
            raise ArgumentError(f"unknown toy backend option: {exc}") from exc
    else:
        path = Path(spec)
        if path.is_dir():
            return load_backend(path)
        raise CapabilityError(f"cannot resolve backend {spec!r}")
