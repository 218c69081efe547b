"""Foreground/background prompt templates, prototypes and prompt populations.

Foreground prompts follow ``[A]... [color] [style] text [position]`` and
background prompts ``[A]... [proximal] with [distal]``; ``[A]`` is the
adaptive prefix. Learnable prompts carry trainable embeddings in every slot
position; prototypes are frozen natural-language fillings of the same
template.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .backend import Backend, TokenSequence
from .errors import ArgumentError, ConfigurationError, DataError

FG_SLOTS = ("color", "style", "position")
BG_SLOTS = ("proximal", "distal")
ROLE_SLOTS = {"fg": FG_SLOTS, "bg": BG_SLOTS}
# Fixed structural word and the slot it precedes.
_ANCHOR_WORD = {"fg": ("text", "position"), "bg": ("with", "distal")}
PREFIX = "prefix"


def allocate_tokens(budget: int, slots: Sequence[str]) -> dict[str, int]:
    """Even split of ``budget`` over ``slots``, remainder to the leading ones (8 -> 3/3/2)."""
    if not slots:
        return {}
    if budget < len(slots):
        raise ArgumentError(f"token budget {budget} is smaller than the {len(slots)} attribute slots")
    base, extra = divmod(budget, len(slots))
    return {s: base + (1 if i < extra else 0) for i, s in enumerate(slots)}


@dataclass
class TemplateSpec:
    role: str
    prefix_len: int = 2
    token_budget: int | None = None
    slots: tuple[str, ...] | None = None  # active attribute slots
    allocation: dict[str, int] | None = None
    boundary: tuple[str, str] = ("", "")  # frozen words after <start> / before <end>

    def __post_init__(self):
        if self.role not in ROLE_SLOTS:
            raise ArgumentError(f"unknown role {self.role!r}")
        if self.token_budget is None:
            self.token_budget = 8 if self.role == "fg" else 4
        if self.slots is None:
            self.slots = ROLE_SLOTS[self.role]
        self.slots = tuple(s for s in ROLE_SLOTS[self.role] if s in self.slots)
        if self.prefix_len < 0:
            raise ArgumentError("prefix_len must be >= 0")
        if self.allocation is None:
            self.allocation = allocate_tokens(self.token_budget, self.slots)
        elif sum(self.allocation.values()) != self.token_budget:
            raise ArgumentError("allocation does not sum to the token budget")

    def to_dict(self) -> dict:
        return {"role": self.role, "prefix_len": self.prefix_len, "token_budget": self.token_budget,
                "slots": list(self.slots), "allocation": dict(self.allocation), "boundary": list(self.boundary)}


@dataclass
class PromptInstance:
    role: str
    kind: str  # "learnable" | "prototype"
    tokens: TokenSequence
    slot_layout: dict[str, tuple[int, int]]  # span name -> [start, stop) token positions
    text: str
    params: torch.Tensor | None = None
    fine_grained: bool = False

    def encode(self, backend: Backend) -> torch.Tensor:
        return backend.encode_prompt(self.tokens, self.params)


def _layout_tokens(role, spans: list[tuple[str, list[int], bool]], backend: Backend):
    """Concatenate named spans between start/end markers."""
    tok = backend.tokenizer
    ids, mask, layout = [tok.start_id], [False], {}
    for name, span_ids, learnable in spans:
        start = len(ids)
        ids.extend(span_ids)
        mask.extend([learnable] * len(span_ids))
        if name:
            layout[name] = (start, len(ids))
    ids.append(tok.end_id)
    mask.append(False)
    if len(ids) > tok.context_length:
        raise ArgumentError(f"{role} prompt of {len(ids)} tokens exceeds the context length")
    return TokenSequence(tuple(ids), tuple(mask)), layout


def _template_spans(spec: TemplateSpec, fill: dict[str, list[int]] | None, backend: Backend):
    """Span list for a learnable (fill None) or prototype template."""
    tok = backend.tokenizer
    learnable = fill is None
    anchor_word, anchor_before = _ANCHOR_WORD[spec.role]

    def span(name, n):
        return (name, [tok.learn_id] * n, True) if learnable else (name, fill[name], False)

    spans = []
    if spec.boundary[0]:
        spans.append(("", tok.encode_words(spec.boundary[0]), False))
    if learnable:
        spans.append(span(PREFIX, spec.prefix_len))
    else:
        spans.append((PREFIX, fill[PREFIX], False))
    for slot in ROLE_SLOTS[spec.role]:
        if slot == anchor_before:
            spans.append(("", tok.encode_words(anchor_word), False))
        if slot in spec.slots:
            spans.append(span(slot, spec.allocation[slot]))
    if spec.boundary[1]:
        spans.append(("", tok.encode_words(spec.boundary[1]), False))
    return spans


def skeleton(spec: TemplateSpec) -> str:
    """Human-readable template, e.g. ``⟨A⟩⟨A⟩ ⟨color⟩ ⟨style⟩ text ⟨position⟩``."""
    anchor_word, anchor_before = _ANCHOR_WORD[spec.role]
    parts = ["⟨A⟩" * spec.prefix_len] if spec.prefix_len else []
    for slot in ROLE_SLOTS[spec.role]:
        if slot == anchor_before:
            parts.append(anchor_word)
        if slot in spec.slots:
            parts.append(f"⟨{slot}⟩")
    return " ".join(parts)


def build_template(spec: TemplateSpec, backend: Backend) -> PromptInstance:
    seq, layout = _layout_tokens(spec.role, _template_spans(spec, None, backend), backend)
    params = torch.zeros(seq.n_learnable, backend.descriptor.embed_dim, dtype=torch.float64)
    return PromptInstance(spec.role, "learnable", seq, layout, skeleton(spec), params)


def build_fg_template(backend: Backend, prefix_len: int = 2, slot_token_budget: int = 8, **kw) -> PromptInstance:
    if slot_token_budget < len(kw.get("slots") or FG_SLOTS):
        raise ArgumentError(f"foreground token budget {slot_token_budget} < number of attribute slots")
    return build_template(TemplateSpec("fg", prefix_len, slot_token_budget, **kw), backend)


def build_bg_template(backend: Backend, prefix_len: int = 2, slot_token_budget: int = 4, **kw) -> PromptInstance:
    if slot_token_budget < len(kw.get("slots") or BG_SLOTS):
        raise ArgumentError(f"background token budget {slot_token_budget} < number of attribute slots")
    return build_template(TemplateSpec("bg", prefix_len, slot_token_budget, **kw), backend)


# --- lexicon and prototypes --------------------------------------------------

@dataclass
class AttributeLexicon:
    attributes: dict[str, list[str]]
    fine_grained: dict[str, dict[str, dict[str, str]]] = field(default_factory=dict)

    def validate(self, role: str, slots: Sequence[str]) -> None:
        for slot in slots:
            if not self.attributes.get(slot):
                raise ConfigurationError(f"lexicon attribute {slot!r} has no candidate words")
        for sid, desc in self.fine_grained.items():
            part = desc.get(role)
            if part is None:
                continue
            missing = [s for s in slots if not part.get(s)]
            if missing:
                raise ConfigurationError(f"fine-grained description for {sid} leaves {missing} empty")

    def with_descriptions(self, descriptions: dict) -> "AttributeLexicon":
        merged = dict(self.fine_grained)
        merged.update(descriptions)
        return AttributeLexicon(dict(self.attributes), merged)


def load_lexicon(path=None) -> AttributeLexicon:
    """Lexicon JSON: ``{"attributes": {slot: [words]}, "fine_grained": {id: {"fg": {...}, "bg": {...}}}}``."""
    if path is None:
        text = resources.files("fewshot_textseg.resources").joinpath("lexicon.json").read_text()
    else:
        path = Path(path)
        if not path.exists():
            raise DataError(f"lexicon {path} not found")
        text = path.read_text(encoding="utf-8")
    doc = json.loads(text)
    return AttributeLexicon({k: list(v) for k, v in doc["attributes"].items()}, doc.get("fine_grained", {}))


class DescriptionSource(Protocol):
    """Producer of per-image fine-grained descriptions (e.g. an offline text generator)."""

    def describe(self, support_id: str) -> dict[str, dict[str, str]]: ...


@dataclass
class FileDescriptionSource:
    path: Path

    def describe(self, support_id: str) -> dict[str, dict[str, str]]:
        doc = json.loads(Path(self.path).read_text(encoding="utf-8"))
        doc = doc.get("fine_grained", doc)
        if support_id not in doc:
            raise DataError(f"no description for {support_id} in {self.path}")
        return doc[support_id]


def prototype_text(role: str, fill: dict[str, str], slots: Sequence[str]) -> str:
    if role == "fg":
        words = ["a"] + [fill[s] for s in ("color", "style") if s in slots] + ["text"]
        words += [fill["position"]] if "position" in slots else []
    else:
        words = ["a"] + ([fill["proximal"]] if "proximal" in slots else []) + ["with"]
        words += [fill["distal"]] if "distal" in slots else []
    return " ".join(words)


def make_prototype(spec: TemplateSpec, fill: dict[str, str], backend: Backend,
                   fine_grained: bool = False) -> PromptInstance:
    tok = backend.tokenizer
    ids = {PREFIX: tok.encode_words("a")}
    for s in spec.slots:
        ids[s] = tok.encode_words(fill[s])
        if not ids[s]:
            raise ConfigurationError(f"attribute {s!r} filled with an empty phrase")
    seq, layout = _layout_tokens(spec.role, _template_spans(spec, ids, backend), backend)
    return PromptInstance(spec.role, "prototype", seq, layout, prototype_text(spec.role, fill, spec.slots),
                          None, fine_grained)


def instantiate_prototypes(lexicon: AttributeLexicon, role: str, count: int, seed: int, backend: Backend,
                           spec: TemplateSpec | None = None, support_ids: Sequence[str] = (),
                           use_fine_grained: bool = True) -> list[PromptInstance]:
    """Fine-grained descriptions of the active supports first, then a seeded
    sample (without replacement) of attribute-word combinations."""
    spec = spec or TemplateSpec(role)
    slots = spec.slots
    lexicon.validate(role, slots)
    fine = []
    if use_fine_grained:
        for sid in support_ids:
            desc = lexicon.fine_grained.get(sid, {}).get(role)
            if desc is not None:
                fine.append(desc)
    combos_total = int(np.prod([len(lexicon.attributes[s]) for s in slots])) if slots else 1
    if count > combos_total + len(fine):
        raise ArgumentError(f"{count} prototypes requested but only {combos_total + len(fine)} available")
    out = [make_prototype(spec, d, backend, fine_grained=True) for d in fine[:count]]
    n_generic = count - len(out)
    if n_generic:
        rng = np.random.default_rng(seed)
        picks = rng.choice(combos_total, size=n_generic, replace=False)
        sizes = [len(lexicon.attributes[s]) for s in slots]
        for flat in picks:
            idx = np.unravel_index(int(flat), sizes) if slots else ()
            fill = {s: lexicon.attributes[s][int(i)] for s, i in zip(slots, idx)}
            out.append(make_prototype(spec, fill, backend))
    return out


# --- populations -------------------------------------------------------------

def split_counts(n_total: int, ratio) -> tuple[int, int]:
    """(learnable, prototypes) for ``ratio`` = prototypes / learnable."""
    r = Fraction(ratio).limit_denominator(1000) if not isinstance(ratio, Fraction) else ratio
    if r <= 0:
        raise ArgumentError("prototype ratio must be positive")
    unit = r.numerator + r.denominator
    if n_total <= 0 or n_total % unit:
        lo = max(unit, (n_total // unit) * unit)
        hi = lo + unit if lo >= n_total else lo
        raise ArgumentError(
            f"n_total={n_total} cannot be split with ratio {r}; nearest valid totals: {sorted({lo, hi})}"
        )
    k = n_total // unit
    return k * r.denominator, k * r.numerator


@dataclass
class PromptPopulation:
    role: str
    spec: TemplateSpec
    learnable: list[PromptInstance]
    prototypes: list[PromptInstance]
    pairing: list[int]  # learnable index -> prototype index
    init_noise: float = 0.0
    seed: int = 0

    def parameters(self) -> list[torch.Tensor]:
        return [p.params for p in self.learnable]

    def encode_learnable(self, backend: Backend) -> torch.Tensor:
        return torch.stack([p.encode(backend) for p in self.learnable])

    def encode_prototypes(self, backend: Backend) -> torch.Tensor:
        with torch.no_grad():
            return torch.stack([p.encode(backend) for p in self.prototypes])

    def describe(self) -> dict:
        return {**self.spec.to_dict(), "learnable": len(self.learnable), "prototypes": len(self.prototypes),
                "fine_grained": sum(p.fine_grained for p in self.prototypes),
                "init_noise": self.init_noise, "seed": self.seed}


def _init_from_prototype(template: PromptInstance, proto: PromptInstance, backend: Backend,
                         match_pooled: bool) -> torch.Tensor:
    """Slot embeddings copied (cyclically) from the prototype's matching spans.

    With ``match_pooled`` a common offset is added to every learnable row so
    the mean token embedding equals the prototype's; for mean-pooling text
    encoders this makes the two encodings coincide.
    """
    table = backend.token_table
    rows = []
    for name, (a, b) in sorted(template.slot_layout.items(), key=lambda kv: kv[1][0]):
        n = b - a
        if n == 0:
            continue
        pa, pb = proto.slot_layout[name]
        src = table[torch.tensor(proto.tokens.ids[pa:pb], dtype=torch.long)]
        rows.append(src[torch.arange(n) % len(src)])
    init = torch.cat(rows).clone() if rows else torch.zeros(0, table.shape[1], dtype=table.dtype)
    if match_pooled and len(init):
        fixed = [i for i, m in zip(template.tokens.ids, template.tokens.learnable_mask) if not m]
        proto_mean = table[torch.tensor(proto.tokens.ids)].mean(dim=0)
        target_sum = proto_mean * len(template.tokens) - table[torch.tensor(fixed)].sum(dim=0)
        init = init + (target_sum - init.sum(dim=0)) / len(init)
    return init


def build_population(role: str, n_total: int, ratio, lexicon: AttributeLexicon, seed: int, backend: Backend,
                     spec: TemplateSpec | None = None, support_ids: Sequence[str] = (),
                     init_noise: float = 0.002, use_fine_grained: bool = True,
                     match_pooled: bool = True) -> PromptPopulation:
    spec = spec or TemplateSpec(role)
    n_learn, n_proto = split_counts(n_total, ratio)
    prototypes = instantiate_prototypes(lexicon, role, n_proto, seed, backend, spec, support_ids, use_fine_grained)
    rng = np.random.default_rng([seed, 1 if role == "fg" else 2])
    learnable, pairing = [], []
    for i in range(n_learn):
        j = i % n_proto
        inst = build_template(spec, backend)
        init = _init_from_prototype(inst, prototypes[j], backend, match_pooled)
        noise = torch.from_numpy(rng.normal(0.0, init_noise, size=tuple(init.shape)))
        inst.params = (init + noise).detach().requires_grad_(True)
        learnable.append(inst)
        pairing.append(j)
    return PromptPopulation(role, spec, learnable, prototypes, pairing, init_noise, seed)
