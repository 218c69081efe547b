"""Seeded train/evaluate harness behind the CLI and the acceptance checks."""
from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .afa import PromptFeatureBank, TrainConfig, emit_bank, train
from .backend import Backend, resolve_backend
from .data import (
    DatasetManifest,
    IMAGE_SIZE,
    load_manifest,
    make_toy_suite,
    preprocess,
    preprocess_mask,
    select_support,
)
from .errors import ArgumentError, ConfigurationError
from .inference import InferenceConfig, MaskGenConfig, segment
from .metrics import EvalReport, ImageScore, auroc, fg_iou, pooled_scores
from .prompt_space import AttributeLexicon, TemplateSpec, build_population, load_lexicon
from .visual_bank import VisualFeatureBank, build_bank


@dataclass
class PromptConfig:
    fg_n_total: int = 32
    fg_ratio: float = 1.0  # prototypes per learnable prompt
    bg_n_total: int = 32
    bg_ratio: float = 1.0
    fg_prefix: int = 2
    bg_prefix: int = 2
    fg_token_budget: int = 8
    bg_token_budget: int = 4
    fg_slots: list[str] = field(default_factory=lambda: ["color", "style", "position"])
    bg_slots: list[str] = field(default_factory=lambda: ["proximal", "distal"])
    fine_grained: bool = True
    init_noise: float = 0.002

    def specs(self) -> tuple[TemplateSpec, TemplateSpec]:
        return (TemplateSpec("fg", self.fg_prefix, self.fg_token_budget, tuple(self.fg_slots)),
                TemplateSpec("bg", self.bg_prefix, self.bg_token_budget, tuple(self.bg_slots)))


@dataclass
class SuiteConfig:
    seed: int = 0
    n_support: int = 8
    n_query: int = 20
    background: str = "mixed"
    canvas: int = IMAGE_SIZE


@dataclass
class RunConfig:
    backend: str | dict = "toy"
    support_manifest: str | None = None
    query_manifest: str | None = None
    lexicon: str | None = None
    k_shot: int = 1
    seeds: list[int] = field(default_factory=lambda: [1])
    image_size: int = IMAGE_SIZE
    afa: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    output_dir: str | None = None
    workers: int = 1
    ablation: dict = field(default_factory=dict)

    def __post_init__(self):
        # prompt-only never lacks a bank: with AFA off the untrained one is used
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.k_shot < 1:
            raise ConfigurationError("k_shot must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    def to_dict(self) -> dict:
        return _plain(self)

    def digest(self) -> str:
        """Hash of everything that shapes the artifacts; seeds live in per-seed subdirectories."""
        doc = self.to_dict()
        for key in ("output_dir", "workers", "seeds"):
            doc.pop(key)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc)


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


_NESTED = {"train": TrainConfig, "prompts": PromptConfig, "inference": InferenceConfig, "suite": SuiteConfig,
           "mask": MaskGenConfig}


def _build(cls, doc: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        sub = _NESTED.get(key)
        kwargs[key] = _build(sub, value) if sub is not None and isinstance(value, dict) else value
    return cls(**kwargs)


def merge_config(base: dict, overrides: dict) -> dict:
    out = json.loads(json.dumps(base))
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = value
    return out


# --- data --------------------------------------------------------------------

@dataclass
class RunData:
    support: DatasetManifest
    query: DatasetManifest
    lexicon: AttributeLexicon


def load_run_data(cfg: RunConfig) -> RunData:
    if cfg.support_manifest:
        support = load_manifest(cfg.support_manifest)
        query = load_manifest(cfg.query_manifest) if cfg.query_manifest else support
    else:
        s = cfg.suite
        suite = make_toy_suite(s.seed, s.n_support, s.n_query, s.background, canvas=s.canvas,
                               patch=_patch_of(cfg))
        support, query = suite.support, suite.query
    lexicon = load_lexicon(cfg.lexicon)
    descriptions = support.extras.get("descriptions")
    if descriptions:
        lexicon = lexicon.with_descriptions(descriptions)
    return RunData(support, query, lexicon)


def _patch_of(cfg: RunConfig) -> int:
    if isinstance(cfg.backend, dict):
        return int(cfg.backend.get("patch", 16))
    if isinstance(cfg.backend, str) and "patch=" in cfg.backend:
        return int(cfg.backend.split("patch=")[1].split(",")[0])
    return 16


# --- training ----------------------------------------------------------------

@dataclass
class SeedArtifacts:
    seed: int
    support_ids: list[str]
    visual_bank: VisualFeatureBank
    prompt_bank: PromptFeatureBank


def train_seed(cfg: RunConfig, seed: int, backend: Backend, data: RunData) -> SeedArtifacts:
    supports = select_support(data.support, cfg.k_shot, seed, size=cfg.image_size)
    vbank = build_bank(supports, backend)
    ids = [s.id for s in supports]
    fg_spec, bg_spec = cfg.prompts.specs()
    p = cfg.prompts
    fg = build_population("fg", p.fg_n_total, p.fg_ratio, data.lexicon, seed, backend, fg_spec, ids,
                          p.init_noise, p.fine_grained)
    bg = build_population("bg", p.bg_n_total, p.bg_ratio, data.lexicon, seed, backend, bg_spec, ids,
                          p.init_noise, p.fine_grained)
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed})
    if cfg.afa:
        pbank = train((fg, bg), vbank, backend, tcfg, supports)
    else:
        pbank = emit_bank((fg, bg), backend, TrainConfig(**{**asdict(tcfg), "epochs": 0}))
    return SeedArtifacts(seed, ids, vbank, pbank)


# --- evaluation --------------------------------------------------------------

def evaluate_query(query_image, gt_mask, vbank, pbank, backend, icfg: InferenceConfig):
    result = segment(query_image, vbank, pbank, backend, icfg)
    score = None
    if gt_mask is not None:
        score = (fg_iou(result.mask, gt_mask), auroc(result.S, gt_mask) if 0 < gt_mask.sum() < gt_mask.size else None)
    return result, score


def evaluate_seed(cfg: RunConfig, art: SeedArtifacts, backend: Backend, query: DatasetManifest,
                  keep_results: bool = False):
    def one(qid):
        image = preprocess(query.raw_image(qid), cfg.image_size)
        raw = query.raw_mask(qid)
        gt = preprocess_mask(raw, cfg.image_size) if raw is not None else None
        result, score = evaluate_query(image, gt, art.visual_bank, art.prompt_bank, backend, cfg.inference)
        return qid, result, score, gt

    ids = query.ids
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outputs = list(pool.map(one, ids))
    else:
        outputs = [one(q) for q in ids]
    scores = [ImageScore(qid, s[0], s[1], art.seed) for qid, _, s, _ in outputs if s is not None]
    results = {qid: r for qid, r, _, _ in outputs} if keep_results else {}
    pooled = None
    if keep_results and all(gt is not None for *_, gt in outputs):
        pooled = pooled_scores([r.mask for _, r, _, _ in outputs], [r.S for _, r, _, _ in outputs],
                               [gt for *_, gt in outputs])
    return scores, results, pooled


def summarize(scores: Sequence[ImageScore]) -> dict:
    au = [s.auroc for s in scores if s.auroc is not None]
    return {"mean_fgiou": float(np.mean([s.fgiou for s in scores])) if scores else float("nan"),
            "mean_auroc": float(np.mean(au)) if au else None, "count": len(scores)}


def run_experiment(cfg: RunConfig, backend: Backend | None = None, data: RunData | None = None) -> EvalReport:
    """Train and evaluate every seed in memory; rows hold per-seed and averaged summaries."""
    backend = backend or resolve_backend(cfg.backend)
    data = data or load_run_data(cfg)
    images, rows = [], []
    for seed in cfg.seeds:
        art = train_seed(cfg, seed, backend, data)
        scores, _, _ = evaluate_seed(cfg, art, backend, data.query)
        images.extend(scores)
        rows.append({"row": f"seed {seed}", **summarize(scores)})
    rows.append(average_row(rows))
    return EvalReport(images, {"run": cfg.digest(), "backend": backend.fingerprint()}, rows=rows)


def average_row(rows: list[dict]) -> dict:
    au = [r["mean_auroc"] for r in rows if r["mean_auroc"] is not None]
    return {"row": "mean", "mean_fgiou": float(np.mean([r["mean_fgiou"] for r in rows])),
            "mean_auroc": float(np.mean(au)) if au else None, "count": sum(r["count"] for r in rows)}


# --- ablations ---------------------------------------------------------------

ABLATION_AXES = ("components", "fg-attributes", "bg-attributes", "counts", "tokens", "suppression")

_COMPONENTS = {
    "visual": {"afa": False, "inference": {"branches": "visual"}},
    "prompt": {"afa": True, "inference": {"branches": "prompt"}},
    "visual+prompt": {"afa": False, "inference": {"branches": "both"}},
    "visual+prompt+AFA": {"afa": True, "inference": {"branches": "both"}},
}
_DEFAULT_SWEEPS = {
    "components": list(_COMPONENTS),
    "fg-attributes": [["color"], ["style"], ["position"], ["color", "style"], ["color", "style", "position"]],
    "bg-attributes": [["proximal"], ["distal"], ["proximal", "distal"]],
    "counts": {"n_total": [8, 16, 32, 64], "ratio": ["1/3", "1", "3"]},
    "tokens": {"fg": [4, 8, 12, 16], "bg": [2, 4, 8]},
    "suppression": [True, False],
}


def ablation_variants(axis: str, sweep=None) -> list[tuple[str, dict, dict]]:
    """(label, config overrides, extra CSV columns) for each point of the sweep."""
    if axis not in ABLATION_AXES:
        raise ArgumentError(f"unknown ablation axis {axis!r}; choose from {', '.join(ABLATION_AXES)}")
    sweep = _DEFAULT_SWEEPS[axis] if sweep is None else sweep
    out = []
    if axis == "components":
        for name in sweep:
            if name not in _COMPONENTS:
                raise ArgumentError(f"unknown component row {name!r}")
            out.append((name, _COMPONENTS[name], {}))
    elif axis in ("fg-attributes", "bg-attributes"):
        role = axis[:2]
        for slots in sweep:
            out.append(("+".join(slots), {"prompts": {f"{role}_slots": list(slots)}}, {}))
    elif axis == "counts":
        for ratio in sweep.get("ratio", []):
            for n in sweep.get("n_total", []):
                r = float(Fraction(str(ratio)))
                out.append((f"N={n} r={ratio}",
                            {"prompts": {"fg_n_total": n, "bg_n_total": n, "fg_ratio": r, "bg_ratio": r}},
                            {"n_total": n, "ratio": str(ratio)}))
    elif axis == "tokens":
        for k in sweep.get("fg", []):
            out.append((f"fg={k}", {"prompts": {"fg_token_budget": k}}, {"role": "fg", "tokens": k}))
        for k in sweep.get("bg", []):
            out.append((f"bg={k}", {"prompts": {"bg_token_budget": k}}, {"role": "bg", "tokens": k}))
    else:
        for on in sweep:
            out.append(("on" if on else "off", {"inference": {"suppression": bool(on)}}, {}))
    if not out:
        raise ArgumentError(f"ablation sweep for {axis!r} is empty")
    return out


def run_ablation(cfg: RunConfig, axis: str, backend: Backend | None = None,
                 data: RunData | None = None) -> list[dict]:
    backend = backend or resolve_backend(cfg.backend)
    data = data or load_run_data(cfg)
    rows = []
    for label, overrides, extra in ablation_variants(axis, cfg.ablation.get(axis)):
        variant = RunConfig.from_dict(merge_config(cfg.to_dict(), overrides))
        mean = run_experiment(variant, backend, data).rows[-1]
        rows.append({"axis": axis, "variant": label, **extra, "fgiou": mean["mean_fgiou"],
                     "auroc": mean["mean_auroc"], "seeds": " ".join(map(str, cfg.seeds))})
    return rows


def write_ablation(rows: list[dict], csv_path, png_path) -> tuple[Path, Path]:
    from . import plotting

    csv_path, png_path = Path(csv_path), Path(png_path)
    keys = list(dict.fromkeys(k for row in rows for k in row))
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in keys})
    axis = rows[0]["axis"]
    if axis == "counts":
        ns = sorted({r["n_total"] for r in rows})
        lines = {f"ratio {ratio}": [next((r["fgiou"] for r in rows if r["n_total"] == n and r["ratio"] == ratio), None)
                                    for n in ns]
                 for ratio in dict.fromkeys(r["ratio"] for r in rows)}
        plotting.line_plot(ns, lines, png_path, xlabel="prompts per role (N)", title=axis, log_x=True)
    else:
        plotting.bar_plot([r["variant"] for r in rows],
                          {"FgIoU": [r["fgiou"] for r in rows], "AUROC": [r["auroc"] for r in rows]},
                          png_path, title=axis)
    return csv_path, png_path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return v
