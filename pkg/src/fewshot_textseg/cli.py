"""``fewshot-textseg`` command line.

Every flag has a config-file equivalent; flags win over the file. Artifacts
go to ``<output root>/<config hash>/``, where the output root comes from
``--output-root``, then ``$FEWSHOT_TEXTSEG_OUT``, then ``./runs``.

Exit codes: 0 success, 2 usage, 3 data, 4 capability/backend.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from ._blocks import read_meta
from .afa import PROMPT_BANK_FORMAT, load_prompt_bank, save_prompt_bank, write_curve
from .backend import resolve_backend
from .data import (
    SynthConfig,
    denormalize,
    preprocess,
    read_image,
    restore_mask,
    synth_generate,
    write_mask,
    write_synth,
)
from .errors import ArgumentError, DataError, TextSegError
from .experiment import (
    ABLATION_AXES,
    RunConfig,
    SeedArtifacts,
    average_row,
    evaluate_seed,
    load_run_data,
    merge_config,
    run_ablation,
    summarize,
    train_seed,
    write_ablation,
)
from .inference import segment
from .metrics import EvalReport
from .visual_bank import BANK_FORMAT, load_visual_bank, save_visual_bank

ENV_OUTPUT_ROOT = "FEWSHOT_TEXTSEG_OUT"


# --- config plumbing ---------------------------------------------------------

def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", type=Path, help="JSON run configuration")
    g.add_argument("--backend", help='backend spec, e.g. "toy", "toy:seed=1" or a weight directory')
    g.add_argument("--support-manifest", help="support manifest (default: seeded synthetic suite)")
    g.add_argument("--query-manifest", help="query manifest")
    g.add_argument("--lexicon", help="attribute lexicon JSON")
    g.add_argument("--k-shot", type=int)
    g.add_argument("--seeds", type=_seeds, help="comma-separated seeds, e.g. 1,2,3")
    g.add_argument("--image-size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--no-afa", dest="afa", action="store_false", default=None, help="skip prompt training")
    g.add_argument("--branches", choices=["both", "visual", "prompt"])
    g.add_argument("--no-suppression", dest="suppression", action="store_false", default=None)
    g.add_argument("--threshold", type=float, help="mask threshold on the fused score")
    g.add_argument("--no-edge-filter", dest="edge_filter", action="store_false", default=None)
    g.add_argument("--suite-seed", type=int, help="seed of the synthetic suite")
    g.add_argument("--n-query", type=int, help="query images in the synthetic suite")
    g.add_argument("--workers", type=int, help="query evaluation worker pool size")
    g.add_argument("--output-root", type=Path)
    g.add_argument("--run-dir", type=Path, help="explicit run directory (overrides the hashed one)")


def _flag_overrides(args) -> dict:
    top = {
        "backend": args.backend, "support_manifest": args.support_manifest,
        "query_manifest": args.query_manifest, "lexicon": args.lexicon, "k_shot": args.k_shot,
        "seeds": args.seeds, "image_size": args.image_size, "afa": args.afa, "workers": args.workers,
    }
    doc = {k: v for k, v in top.items() if v is not None}
    train = {k: v for k, v in {"epochs": args.epochs, "lr": args.lr}.items() if v is not None}
    inference = {k: v for k, v in {"branches": args.branches, "suppression": args.suppression}.items()
                 if v is not None}
    mask = {k: v for k, v in {"threshold": args.threshold, "edge_filter": args.edge_filter}.items()
            if v is not None}
    suite = {k: v for k, v in {"seed": args.suite_seed, "n_query": args.n_query}.items() if v is not None}
    if args.image_size is not None:
        suite.setdefault("canvas", args.image_size)
    if mask:
        inference["mask"] = mask
    for key, sub in (("train", train), ("inference", inference), ("suite", suite)):
        if sub:
            doc[key] = sub
    return doc


def build_config(args) -> RunConfig:
    base = RunConfig().to_dict()
    if args.config is not None:
        try:
            file_doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DataError(f"config file {args.config} not found") from exc
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"config file {args.config} is not valid JSON: {exc}") from exc
        base = merge_config(base, file_doc)
    return RunConfig.from_dict(merge_config(base, _flag_overrides(args)))


def run_dir_for(cfg: RunConfig, args) -> Path:
    if args.run_dir is not None:
        return args.run_dir
    root = args.output_root or cfg.output_dir or os.environ.get(ENV_OUTPUT_ROOT) or "runs"
    return Path(root) / cfg.digest()


def _write_config(cfg: RunConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = build_config(args)
    backend = resolve_backend(cfg.backend)
    data = load_run_data(cfg)
    run_dir = run_dir_for(cfg, args)
    _write_config(cfg, run_dir)
    written = {}
    for seed in cfg.seeds:
        art = train_seed(cfg, seed, backend, data)
        seed_dir = run_dir / f"seed_{seed}"
        save_visual_bank(art.visual_bank, seed_dir / "visual_bank")
        save_prompt_bank(art.prompt_bank, seed_dir / "prompt_bank")
        write_curve(art.prompt_bank.training_curve, seed_dir / "training_curve.csv")
        if args.plots:
            plotting.curve_plot(art.prompt_bank.training_curve, seed_dir / "training_curve.png")
        written[str(seed)] = {"support_ids": art.support_ids, "dir": str(seed_dir)}
    _emit({"run_dir": str(run_dir), "backend": backend.fingerprint(), "seeds": written})
    return 0


def _load_seed(run_dir: Path, seed: int, backend) -> SeedArtifacts:
    seed_dir = run_dir / f"seed_{seed}"
    if not (seed_dir / "visual_bank").is_dir() or not (seed_dir / "prompt_bank").is_dir():
        raise DataError(f"no trained banks in {seed_dir}; run `fewshot-textseg train` with the same config first")
    vbank = load_visual_bank(seed_dir / "visual_bank", backend)
    pbank = load_prompt_bank(seed_dir / "prompt_bank", backend)
    return SeedArtifacts(seed, list(vbank.support_ids), vbank, pbank)


def _write_heatmaps(results: dict, query, out_dir: Path, image_size: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for qid, res in results.items():
        for name, grid in res.maps().items():
            plotting.save_heatmap(grid, out_dir / f"{qid}_{name}.png", vmax=1.0 if name != "S" else None)
        write_mask(out_dir / f"{qid}_mask.png", res.mask)
        shown = (denormalize(preprocess(query.raw_image(qid), image_size)) * 255).astype(np.uint8)
        plotting.save_overlay(shown, res.mask, out_dir / f"{qid}_overlay.png")


def cmd_eval(args) -> int:
    cfg = build_config(args)
    backend = resolve_backend(cfg.backend)
    data = load_run_data(cfg)
    run_dir = run_dir_for(cfg, args)
    images, rows, pooled = [], [], {}
    for seed in cfg.seeds:
        art = _load_seed(run_dir, seed, backend)
        scores, results, pool = evaluate_seed(cfg, art, backend, data.query, keep_results=True)
        images.extend(scores)
        rows.append({"row": f"seed {seed}", **summarize(scores)})
        pooled[str(seed)] = pool
        if args.heatmaps:
            _write_heatmaps(results, data.query, run_dir / "heatmaps" / f"seed_{seed}", cfg.image_size)
    rows.append(average_row(rows))
    report = EvalReport(images, {"run": cfg.digest(), "backend": backend.fingerprint()}, pooled, rows)
    (run_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    report.write_csv(run_dir / "report.csv")
    if args.format == "json":
        sys.stdout.write(report.to_json())
    elif args.format == "csv":
        sys.stdout.write((run_dir / "report.csv").read_text(encoding="utf-8"))
    else:
        print(report.to_table())
    return 0


def cmd_segment(args) -> int:
    cfg = build_config(args)
    backend = resolve_backend(cfg.backend)
    run_dir = run_dir_for(cfg, args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    art = _load_seed(run_dir, seed, backend)
    out_dir = args.out or run_dir / "segment"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in args.images:
        if not Path(path).is_file():
            raise DataError(f"image {path} not found")
        raw = read_image(path)
        res = segment(preprocess(raw, cfg.image_size), art.visual_bank, art.prompt_bank, backend, cfg.inference)
        stem = Path(path).stem
        mask_path = out_dir / f"{stem}_mask.png"
        write_mask(mask_path, restore_mask(res.mask, raw.shape[:2], cfg.image_size))
        plotting.save_heatmap(res.S, out_dir / f"{stem}_S.png")
        written.append(str(mask_path))
    _emit({"masks": written})
    return 0


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    run_dir = run_dir_for(cfg, args)
    rows = run_ablation(cfg, args.axis)
    out = run_dir / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    csv_path, png_path = write_ablation(rows, out / f"{args.axis}.csv", out / f"{args.axis}.png")
    sys.stdout.write(csv_path.read_text(encoding="utf-8"))
    print(f"# plot: {png_path}", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    written = {}
    for split, n, offset in (("support", args.n_support, 10_000), ("query", args.n_query, 20_000)):
        if n <= 0:
            continue
        scfg = SynthConfig(canvas=args.canvas, background=args.background, seed=offset + args.seed)
        manifest, _ = synth_generate(scfg, n, prefix=split[0], split=split)
        written[split] = str(write_synth(manifest, out / split))
    if not written:
        raise ArgumentError("nothing to generate")
    _emit(written)
    return 0


def cmd_banks_inspect(args) -> int:
    backend = resolve_backend(args.backend) if args.backend else None
    out = []
    for path in args.paths:
        path = Path(path)
        if not (path / "meta.json").is_file():
            raise DataError(f"{path} has no meta.json")
        meta = read_meta(path)
        if meta.get("format") == BANK_FORMAT:
            load_visual_bank(path, backend)
        elif meta.get("format") == PROMPT_BANK_FORMAT:
            load_prompt_bank(path, backend)
        else:
            raise DataError(f"{path} holds an unknown artifact format {meta.get('format')!r}")
        summary = {k: meta[k] for k in ("format", "version", "backend_hash", "counts") if k in meta}
        for k in ("support_ids", "fingerprint"):
            if k in meta:
                summary[k] = meta[k]
        summary["path"] = str(path)
        out.append(summary)
    _emit(out if len(out) > 1 else out[0])
    return 0


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-textseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="build visual banks and train prompts for each seed")
    _common(p)
    p.add_argument("--plots", action="store_true", help="also plot the training curves")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="segment the query set with trained banks and score it")
    _common(p)
    p.add_argument("--heatmaps", action="store_true", help="write score maps and masks as PNGs")
    p.add_argument("--format", choices=["table", "json", "csv"], default="table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="segment arbitrary images with trained banks")
    _common(p)
    p.add_argument("images", nargs="+")
    p.add_argument("--seed", type=int, help="which seed's banks to use (default: first configured)")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("ablate", help="sweep one ablation axis; writes CSV and a plot")
    _common(p)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write a synthetic support/query set to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--n-support", type=int, default=8)
    p.add_argument("--n-query", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--background", default="mixed", choices=["flat", "gradient", "noise", "mixed"])
    p.add_argument("--canvas", type=int, default=640)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("banks-inspect", help="summarize persisted banks")
    p.add_argument("paths", nargs="+")
    p.add_argument("--backend", help="also verify the banks against this backend")
    p.set_defaults(func=cmd_banks_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TextSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        # malformed config values that slipped past the typed layers
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
