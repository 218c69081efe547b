"""Adaptive feature alignment: the prompt-learning objective and its trainer.

Three terms, each applied to the foreground and (with roles swapped) the
background population:

* alignment -- Euclidean distance between each encoded learnable prompt and
  its paired prototype;
* visual-prompt contrast -- two-way InfoNCE of the pooled support feature
  against the mean foreground and background prompt features;
* triplet hinge -- ``max(|z - p_own|^2 - |z - p_other|^2, 0)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import _blocks
from .backend import Backend
from .errors import ArgumentError, BackendMismatchError, CapabilityError, DataError, NumericError, TrainingDiverged
from .prompt_space import PromptPopulation
from .visual_bank import VisualFeatureBank

PROMPT_BANK_FORMAT = "fewshot-textseg/prompt-bank"
PROMPT_BANK_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 20
    tau: float | None = None  # None: the backend's temperature
    lambda_align: float = 1.0
    lambda_vp: float = 1.0
    lambda_tri: float = 1.0
    seed: int = 0
    mean_includes_prototypes: bool = False
    pooled_layer: int = -1

    def __post_init__(self):
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ArgumentError("lr must be positive, momentum and weight decay non-negative")
        if self.epochs < 0:
            raise ArgumentError("epochs must be >= 0")
        if min(self.lambda_align, self.lambda_vp, self.lambda_tri) < 0:
            raise ArgumentError("loss weights must be non-negative")
        if self.tau is not None and self.tau <= 0:
            raise ArgumentError("tau must be positive")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.double()
    return torch.from_numpy(np.array(x, dtype=np.float64))


def _rows(z: torch.Tensor) -> torch.Tensor:
    return z[None] if z.dim() == 1 else z


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite derivative at 0; identical pairs get distance 0 and gradient 0
    sq = (x * x).sum(dim=-1)
    return torch.where(sq > 0, torch.sqrt(sq.clamp_min(1e-300)), torch.zeros_like(sq))


def align_distance(learned: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean Euclidean distance between matching rows."""
    if len(learned) == 0:
        raise ArgumentError("alignment needs at least one pair")
    return _safe_norm(learned - targets).mean()


def loss_align(population: PromptPopulation, backend: Backend) -> torch.Tensor:
    if not population.learnable:
        raise ArgumentError("empty population")
    learned = population.encode_learnable(backend)
    protos = population.encode_prototypes(backend)
    return align_distance(learned, protos[population.pairing])


def cosine(z: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    z = _rows(z)
    num = z @ p
    den = z.norm(dim=-1).clamp_min(1e-12) * p.norm().clamp_min(1e-12)
    return (num / den).clamp(-1.0, 1.0)


def loss_vp(z, p_f, p_b, tau: float) -> torch.Tensor:
    """Mean over rows of ``-log softmax([cos(z,p_f), cos(z,p_b)] / tau)[0]``."""
    if not tau > 0:
        raise ArgumentError("tau must be positive")
    z, p_f, p_b = _as_tensor(z), _as_tensor(p_f), _as_tensor(p_b)
    if _rows(z).shape[0] == 0:
        return z.new_zeros(())
    a = cosine(z, p_f) / tau
    b = cosine(z, p_b) / tau
    # -log(e^a / (e^a + e^b)) = softplus(b - a)
    return F.softplus(b - a).mean()


def loss_tri(z, p_f, p_b) -> torch.Tensor:
    z, p_f, p_b = _as_tensor(z), _as_tensor(p_f), _as_tensor(p_b)
    z = _rows(z)
    if z.shape[0] == 0:
        return z.new_zeros(())
    gap = ((z - p_f) ** 2).sum(-1) - ((z - p_b) ** 2).sum(-1)
    return torch.relu(gap).mean()


@dataclass
class LossTerms:
    total: torch.Tensor
    align: torch.Tensor
    vp: torch.Tensor
    tri: torch.Tensor

    def as_floats(self) -> dict:
        return {"L_align": float(self.align), "L_vp": float(self.vp), "L_tri": float(self.tri),
                "total": float(self.total)}


def _unpack(populations) -> tuple[PromptPopulation, PromptPopulation]:
    if isinstance(populations, Mapping):
        return populations["fg"], populations["bg"]
    fg, bg = populations
    return fg, bg


def prompt_means(fg_feats, bg_feats, fg_protos, bg_protos, include_prototypes: bool):
    if include_prototypes:
        return torch.cat([fg_feats, fg_protos]).mean(0), torch.cat([bg_feats, bg_protos]).mean(0)
    return fg_feats.mean(0), bg_feats.mean(0)


def objective(populations, bank: VisualFeatureBank, backend: Backend, cfg: TrainConfig,
              support_ids: Sequence[str] | None = None) -> LossTerms:
    fg, bg = _unpack(populations)
    tau = cfg.tau or backend.descriptor.temperature
    fg_feats, bg_feats = fg.encode_learnable(backend), bg.encode_learnable(backend)
    fg_protos, bg_protos = fg.encode_prototypes(backend), bg.encode_prototypes(backend)
    p_f, p_b = prompt_means(fg_feats, bg_feats, fg_protos, bg_protos, cfg.mean_includes_prototypes)
    z_f = _as_tensor(bank.pooled("fg", cfg.pooled_layer, support_ids))
    z_b = _as_tensor(bank.pooled("bg", cfg.pooled_layer, support_ids))

    align = align_distance(fg_feats, fg_protos[fg.pairing]) + align_distance(bg_feats, bg_protos[bg.pairing])
    vp = loss_vp(z_f, p_f, p_b, tau) + loss_vp(z_b, p_b, p_f, tau)
    tri = loss_tri(z_f, p_f, p_b) + loss_tri(z_b, p_b, p_f)
    total = cfg.lambda_align * align + cfg.lambda_vp * vp + cfg.lambda_tri * tri
    return LossTerms(total, align, vp, tri)


def total_loss(populations, bank: VisualFeatureBank, backend: Backend, cfg: TrainConfig,
               support_ids: Sequence[str] | None = None) -> tuple[float, list[np.ndarray]]:
    """Objective value and its gradient for every learnable parameter tensor (fg then bg)."""
    if not backend.descriptor.supports_text_gradients:
        raise CapabilityError(f"backend {backend.descriptor.name} cannot differentiate text encodings")
    fg, bg = _unpack(populations)
    params = fg.parameters() + bg.parameters()
    terms = objective(populations, bank, backend, cfg, support_ids)
    if terms.total.requires_grad:
        grads = torch.autograd.grad(terms.total, params, allow_unused=True)
    else:
        grads = [None] * len(params)
    return float(terms.total.detach()), [np.zeros(tuple(p.shape)) if g is None else g.numpy().copy()
                                for p, g in zip(params, grads)]


# --- prompt feature bank -----------------------------------------------------

@dataclass
class PromptFeatureBank:
    fg_features: np.ndarray  # (n_fg, d) learnable rows then prototypes
    bg_features: np.ndarray
    fg_kinds: list[str]
    bg_kinds: list[str]
    fg_texts: list[str]
    bg_texts: list[str]
    p_f: np.ndarray
    p_b: np.ndarray
    fingerprint: dict
    backend_hash: str
    training_curve: list[dict] = field(default_factory=list, compare=False)

    def __post_init__(self):
        for arr in (self.fg_features, self.bg_features, self.p_f, self.p_b):
            arr.setflags(write=False)

    def counts(self) -> dict:
        return {role: {"learnable": kinds.count("learnable"), "prototype": kinds.count("prototype")}
                for role, kinds in (("fg", self.fg_kinds), ("bg", self.bg_kinds))}


def fingerprint_of(fg: PromptPopulation, bg: PromptPopulation, cfg: TrainConfig, backend: Backend) -> dict:
    return {
        "optimizer": {"name": "sgd", "lr": cfg.lr, "momentum": cfg.momentum, "weight_decay": cfg.weight_decay},
        "epochs": cfg.epochs,
        "tau": cfg.tau or backend.descriptor.temperature,
        "loss_weights": {"align": cfg.lambda_align, "vp": cfg.lambda_vp, "tri": cfg.lambda_tri},
        "seed": cfg.seed,
        "mean_includes_prototypes": cfg.mean_includes_prototypes,
        "pooled_layer": cfg.pooled_layer,
        "prompts": {"fg": fg.describe(), "bg": bg.describe()},
        "backend_hash": backend.fingerprint(),
    }


def emit_bank(populations, backend: Backend, cfg: TrainConfig, curve=None) -> PromptFeatureBank:
    fg, bg = _unpack(populations)
    with torch.no_grad():
        fg_l, bg_l = fg.encode_learnable(backend), bg.encode_learnable(backend)
        fg_p, bg_p = fg.encode_prototypes(backend), bg.encode_prototypes(backend)
        p_f, p_b = prompt_means(fg_l, bg_l, fg_p, bg_p, cfg.mean_includes_prototypes)

    def side(pop, learned, protos):
        feats = torch.cat([learned, protos]).numpy().copy()
        kinds = ["learnable"] * len(learned) + ["prototype"] * len(protos)
        texts = [p.text for p in pop.learnable] + [p.text for p in pop.prototypes]
        return feats, kinds, texts

    fgf, fgk, fgt = side(fg, fg_l, fg_p)
    bgf, bgk, bgt = side(bg, bg_l, bg_p)
    return PromptFeatureBank(fgf, bgf, fgk, bgk, fgt, bgt, p_f.numpy().copy(), p_b.numpy().copy(),
                             fingerprint_of(fg, bg, cfg, backend), backend.fingerprint(), list(curve or []))


def _curve_row(epoch: int, populations, bank, backend, cfg) -> dict:
    with torch.no_grad():
        terms = objective(populations, bank, backend, cfg)
    return {"epoch": epoch, **terms.as_floats()}


def train(populations, bank: VisualFeatureBank, backend: Backend, cfg: TrainConfig,
          supports: Sequence | None = None) -> PromptFeatureBank:
    """SGD (momentum, weight decay) on learnable slot embeddings only.

    Each epoch takes one step per support, in sorted id order. The curve
    records the full objective before training (epoch 0) and after every
    epoch.
    """
    if not backend.descriptor.supports_text_gradients:
        raise CapabilityError(f"backend {backend.descriptor.name} cannot differentiate text encodings")
    fg, bg = _unpack(populations)
    if len(bank.pooled("fg", cfg.pooled_layer)) == 0:
        raise DataError("visual bank has no pooled foreground features")
    if supports is not None:
        ids = sorted(getattr(s, "id", s) for s in supports)
    else:
        ids = sorted(set(bank.pooled_fg_ids) | set(bank.pooled_bg_ids))
    torch.manual_seed(cfg.seed)
    params = fg.parameters() + bg.parameters()
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    curve = [_curve_row(0, populations, bank, backend, cfg)]
    last_good = emit_bank(populations, backend, cfg, curve)
    for epoch in range(1, cfg.epochs + 1):
        try:
            for sid in ids:
                terms = objective(populations, bank, backend, cfg, [sid])
                if not torch.isfinite(terms.total):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, support {sid}", last_good, epoch)
                opt.zero_grad()
                terms.total.backward()
                opt.step()
            row = _curve_row(epoch, populations, bank, backend, cfg)
        except TrainingDiverged:
            raise
        except NumericError as exc:
            raise TrainingDiverged(f"training diverged at epoch {epoch}: {exc}", last_good, epoch) from exc
        if not math.isfinite(row["total"]) or not all(torch.isfinite(p).all() for p in params):
            raise TrainingDiverged(f"non-finite state after epoch {epoch}", last_good, epoch)
        curve.append(row)
        last_good = emit_bank(populations, backend, cfg, curve)
    return last_good


# --- persistence -------------------------------------------------------------

def save_prompt_bank(bank: PromptFeatureBank, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blocks = {name: _blocks.write_block(directory / f"{name}.f32", getattr(bank, name))
              for name in ("fg_features", "bg_features", "p_f", "p_b")}
    _blocks.write_meta(directory, {
        "format": PROMPT_BANK_FORMAT,
        "version": PROMPT_BANK_VERSION,
        "backend_hash": bank.backend_hash,
        "fingerprint": bank.fingerprint,
        "counts": bank.counts(),
        "fg_kinds": bank.fg_kinds,
        "bg_kinds": bank.bg_kinds,
        "fg_texts": bank.fg_texts,
        "bg_texts": bank.bg_texts,
        "blocks": blocks,
    })
    return directory


def load_prompt_bank(directory, backend: Backend | None = None) -> PromptFeatureBank:
    directory = Path(directory)
    meta = _blocks.read_meta(directory)
    if meta.get("format") != PROMPT_BANK_FORMAT:
        raise DataError(f"{directory} is not a prompt bank")
    if meta.get("version") != PROMPT_BANK_VERSION:
        raise DataError(f"unsupported prompt bank version {meta.get('version')}")
    if backend is not None and backend.fingerprint() != meta["backend_hash"]:
        raise BackendMismatchError(
            f"prompt bank in {directory} was trained with backend {meta['backend_hash']}, "
            f"current backend is {backend.fingerprint()}"
        )
    arrays = {k: _blocks.read_block(directory, v) for k, v in meta["blocks"].items()}
    return PromptFeatureBank(arrays["fg_features"], arrays["bg_features"], meta["fg_kinds"], meta["bg_kinds"],
                             meta["fg_texts"], meta["bg_texts"], arrays["p_f"], arrays["p_b"],
                             meta["fingerprint"], meta["backend_hash"])


def write_curve(curve: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "L_align", "L_vp", "L_tri", "total"])
        writer.writeheader()
        for row in curve:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    return path
