"""Command-line front end: ``patchforge <command> [flags]``.

Every command reads an optional JSON ``--config`` whose keys are flag
names (dashes or underscores); flags given on the command line win. All
artifacts are written under ``--out``. Failures exit nonzero with one JSON
line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from patchforge.errors import ContractError, InvalidInputError, MissingInputError, PatchforgeError

log = logging.getLogger("patchforge")

THREADS_ENV = "PATCHFORGE_THREADS"
STOCHASTIC = {"synth", "train", "ral"}


# -- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of flag values; explicit flags win")
    p.add_argument("--seed", type=int, help="random seed (required by synth, train and ral)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _train_flags(p: argparse.ArgumentParser, epochs: int) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=epochs)
    g.add_argument("--batch", type=int, default=16)
    g.add_argument("--lr", type=float, default=0.05)
    g.add_argument("--lr-second", type=float, default=0.01)
    g.add_argument("--lr-decay", type=float, default=0.1)
    g.add_argument("--milestones", type=int, nargs="+")
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--precision", choices=("float32", "float64"), default="float32")


def _model_input(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, help="patch manifest (JSONL)")
    p.add_argument("--checkpoint", type=Path, help="model checkpoint")
    p.add_argument("--batch", type=int, default=64, help="inference batch size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus with planted mislabels")
    _common(p)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--slides-per-class", type=int, default=8)
    p.add_argument("--val-slides-per-class", type=int, default=2)
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--height", type=int, default=768)
    p.add_argument("--rho", type=float, default=0.25)
    p.add_argument("--patch", type=int, default=128)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--train-patches-per-slide", type=int)
    p.add_argument("--val-patches-per-slide", type=int)
    p.add_argument("--augment", default="rot_mirror_8", help="augmentation scheme or 'none'")
    p.add_argument("--noise", type=float, default=24.0)
    p.add_argument("--ellipse-scale", type=float, nargs=2)

    p = sub.add_parser("crop", help="crop slides into a patch manifest")
    _common(p)
    p.add_argument("--index", type=Path, help="slide index JSON (as written by synth)")
    p.add_argument("--split", help="only slides of this split from the index")
    p.add_argument("--slide", type=Path, action="append", default=[], help="slide raster (repeatable)")
    p.add_argument("--label", type=int, action="append", default=[], help="label per --slide")
    p.add_argument("--classes", nargs="+", help="class names for --slide inputs")
    p.add_argument("--patch", type=int, default=512)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--roi", action="store_true", help="keep only windows over Otsu foreground")
    p.add_argument("--min-foreground", type=float, default=0.5)

    p = sub.add_parser("augment", help="expand a manifest into rotation/mirror variants")
    _common(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--scheme", default="rot_mirror_8")

    p = sub.add_parser("train", help="train a network on the alive patches of a manifest")
    _common(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--arch", choices=("refinenet", "adn"), default="refinenet")
    p.add_argument("--init", type=Path, help="continue from this checkpoint")
    _train_flags(p, epochs=10)

    p = sub.add_parser("ral", help="reversed active learning refinement")
    _common(p)
    p.add_argument("--manifest", type=Path, help="training manifest")
    p.add_argument("--val", type=Path, help="validation manifest")
    p.add_argument("--checkpoint", type=Path, help="pre-trained model")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--group-threshold", type=int, default=4)
    p.add_argument("--max-iterations", type=int, default=5)
    p.add_argument("--patience", type=int, default=1)
    p.add_argument("--min-improvement", type=float, default=0.0)
    p.add_argument("--variants", type=int, default=8)
    _train_flags(p, epochs=10)

    p = sub.add_parser("eval", help="patch-level ACA, per-class ACA and confusion matrix")
    _common(p)
    _model_input(p)
    p.add_argument("--split", default="", help="split name recorded in the report")

    p = sub.add_parser("predict-slide", help="slide labels by voting over patch predictions")
    _common(p)
    _model_input(p)

    p = sub.add_parser("features", help="export penultimate-layer features as CSV")
    _common(p)
    _model_input(p)
    p.add_argument("--layer", default="penultimate")
    return parser


def _dest_names(parser: argparse.ArgumentParser) -> set[str]:
    return {a.dest for a in parser._actions if a.dest not in ("help", "config")}


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse twice: once to find ``--config``, then with its values as defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    if not args.config.is_file():
        raise MissingInputError(f"config not found: {args.config}")
    try:
        cfg = json.loads(args.config.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{args.config}: invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise InvalidInputError(f"{args.config}: expected a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = _dest_names(sub)
    values = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise InvalidInputError(f"{args.config}: unknown key {key!r} for {args.command}")
        action = next(a for a in sub._actions if a.dest == dest)
        if action.type is Path and value is not None:
            value = Path(value)
        values[dest] = value
    sub.set_defaults(**values)
    return parser.parse_args(argv)


# -- helpers ------------------------------------------------------------------


def _require(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise ContractError(f"{what} is required")
    if not Path(path).exists():
        raise MissingInputError(f"{what} not found: {path}")
    return Path(path)


def _out_dir(args) -> Path:
    if args.out is None:
        raise ContractError("--out is required")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _train_config(args):
    from patchforge.train import TrainConfig

    return TrainConfig(epochs=args.epochs, batch=args.batch, lr=args.lr, lr_second=args.lr_second,
                       lr_decay=args.lr_decay,
                       milestones=tuple(args.milestones) if args.milestones else None,
                       momentum=args.momentum, seed=args.seed, precision=args.precision)


def _read_manifest(path: Optional[Path], what: str = "--manifest"):
    from patchforge.data.manifest import read_manifest

    return read_manifest(_require(path, what), check_slides=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> None:
    from patchforge.data.synth import SynthConfig, generate_synthetic_corpus

    out = _out_dir(args)
    extra = {"ellipse_scale": tuple(args.ellipse_scale)} if args.ellipse_scale else {}
    cfg = SynthConfig(num_classes=args.classes, slides_per_class=args.slides_per_class,
                      val_slides_per_class=args.val_slides_per_class, width=args.width,
                      height=args.height, rho=args.rho, seed=args.seed, patch_size=args.patch,
                      overlap=args.overlap, train_patches_per_slide=args.train_patches_per_slide,
                      val_patches_per_slide=args.val_patches_per_slide,
                      augment=None if args.augment == "none" else args.augment, noise=args.noise,
                      **extra)
    corpus = generate_synthetic_corpus(out, cfg)
    print(json.dumps({"train": len(corpus.train), "val": len(corpus.val),
                      "mislabeled": sum(bool(r.mislabeled) for r in corpus.train.records)}))


def cmd_crop(args) -> None:
    from patchforge.data.manifest import Manifest, write_manifest
    from patchforge.data.patches import binarize_roi, crop_patches
    from patchforge.data.slides import load_slide
    from patchforge.data.synth import read_slide_index

    jobs = []  # (raster path, label, mask path, path relative to the output)
    out = _out_dir(args)
    if args.index is not None:
        doc = read_slide_index(_require(args.index, "slide index"))
        root = args.index.parent
        classes = list(doc["classes"])
        for s in doc["slides"]:
            if args.split and s.get("split") != args.split:
                continue
            mask = root / s["mask"] if s.get("mask") else None
            jobs.append((root / s["path"], int(s["label"]), mask))
    if args.slide:
        if len(args.label) != len(args.slide):
            raise ContractError("give exactly one --label per --slide")
        for path, label in zip(args.slide, args.label):
            jobs.append((path, label, None))
        if args.index is None:
            classes = args.classes or [f"class{k}" for k in range(max(args.label) + 1)]
    if not jobs:
        raise ContractError("nothing to crop: pass --index or --slide")
    for path, label, mask in jobs:
        _require(path, "slide")
        if mask is not None:
            _require(mask, "mask")
        if not 0 <= label < len(classes):
            raise InvalidInputError(f"label {label} outside the {len(classes)} classes")

    records = []
    for path, label, mask in jobs:
        rel = Path(os.path.relpath(Path(path).resolve(), out.resolve())).as_posix()
        slide = load_slide(path, label, mask_path=mask, rel_path=rel)
        roi = binarize_roi(slide.pixels) if args.roi else None
        records += crop_patches(slide, args.patch, args.overlap, start_index=len(records),
                                roi_mask=roi, min_foreground=args.min_foreground)
    prov = {"source": "crop", "patch_size": args.patch, "overlap": args.overlap, "roi": args.roi}
    write_manifest(Manifest(records, classes, prov, out), out / "manifest.jsonl")
    print(json.dumps({"slides": len(jobs), "patches": len(records)}))


def cmd_augment(args) -> None:
    from patchforge.data.manifest import write_manifest
    from patchforge.data.patches import augment_records

    src = _read_manifest(args.manifest)
    out = _out_dir(args)
    aug = src.with_records(augment_records(src.records, args.scheme))
    aug.provenance = dict(src.provenance, augment=args.scheme)
    write_manifest(aug, out / "manifest.jsonl")
    print(json.dumps({"originals": len(src), "patches": len(aug)}))


def _load_model(path: Path):
    from patchforge.checkpoint import load_checkpoint

    return load_checkpoint(_require(path, "--checkpoint"))


def cmd_train(args) -> None:
    from patchforge.checkpoint import save_checkpoint
    from patchforge.models import build_adn, build_refinenet
    from patchforge.train import train, write_loss_csv

    manifest = _read_manifest(args.manifest)
    cfg = _train_config(args)
    if args.init is not None:
        model = _load_model(args.init)
    else:
        dtype = np.float64 if cfg.precision == "float64" else np.float32
        build = build_refinenet if args.arch == "refinenet" else build_adn
        model = build(num_classes=len(manifest.classes), dtype=dtype, seed=args.seed)
    out = _out_dir(args)
    result = train(model, manifest, cfg)
    save_checkpoint(model, out / "model.ckpt")
    write_loss_csv(out / "loss.csv", result)
    _write_json(out / "train_config.json", {**asdict(cfg), "arch": model.arch})
    print(json.dumps({"epochs": len(result.losses),
                      "final_loss": result.losses[-1] if result.losses else None}))


def cmd_ral(args) -> None:
    from patchforge.checkpoint import save_checkpoint
    from patchforge.data.loader import PatchSource
    from patchforge.data.manifest import write_manifest
    from patchforge.ral import (RALConfig, make_evaluator, make_finetune, make_scorer, removal_quality,
                                run_ral, write_audit_log, write_history_csv)

    manifest = _read_manifest(args.manifest)
    val = _read_manifest(args.val, "--val")
    model = _load_model(args.checkpoint)
    cfg = RALConfig(theta=args.theta, group_threshold=args.group_threshold,
                    max_iterations=args.max_iterations, patience=args.patience,
                    min_improvement=args.min_improvement, variants=args.variants)
    tcfg = _train_config(args)
    out = _out_dir(args)
    src = PatchSource(manifest, dtype=model.dtype)
    result = run_ral(manifest, model, cfg, make_scorer(src, tcfg.batch * 4),
                     make_evaluator(val, PatchSource(val, dtype=model.dtype)),
                     make_finetune(manifest, tcfg, src))
    result.manifest.provenance = dict(manifest.provenance, ral_best_iteration=result.best_iteration)
    write_manifest(result.manifest, out / "refined.jsonl")
    save_checkpoint(result.model, out / "best.ckpt")
    write_history_csv(out / "history.csv", result.history)
    write_audit_log(out / "audit.jsonl", result.audit)
    summary = {"best_iteration": result.best_iteration, "size": len(result.manifest.alive()),
               "ral_config": asdict(cfg)}
    if any(r.truth is not None for r in manifest.records):
        summary["removal_quality"] = removal_quality(result.manifest)
    _write_json(out / "ral_summary.json", summary)
    print(json.dumps({"best_iteration": result.best_iteration, "size": summary["size"]}))


def cmd_eval(args) -> None:
    from patchforge.train import evaluate, write_class_csv, write_confusion_csv

    manifest = _read_manifest(args.manifest)
    model = _load_model(args.checkpoint)
    out = _out_dir(args)
    rep = evaluate(model, manifest, split=args.split)
    _write_json(out / "report.json", rep.as_dict())
    write_class_csv(out / "classes.csv", rep, manifest.classes)
    write_confusion_csv(out / "confusion.csv", rep, manifest.classes)
    print(json.dumps({"aca": rep.aca, "count": rep.count}))


def cmd_predict_slide(args) -> None:
    from patchforge.data.loader import PatchSource
    from patchforge.train import fuse_slice_vote, group_by_slide, predict_probs_records, write_slide_csv

    manifest = _read_manifest(args.manifest)
    model = _load_model(args.checkpoint)
    out = _out_dir(args)
    recs = list(manifest.records)
    probs = predict_probs_records(model, PatchSource(manifest, dtype=model.dtype), recs, args.batch)
    groups = group_by_slide(recs, probs)
    labels = fuse_slice_vote(groups)
    write_slide_csv(out / "slides.csv", labels, manifest.classes, {k: len(v) for k, v in groups.items()})
    print(json.dumps({"slides": len(labels)}))


def cmd_features(args) -> None:
    from patchforge.data.loader import PatchSource
    from patchforge.train import export_features, write_features_csv

    manifest = _read_manifest(args.manifest)
    model = _load_model(args.checkpoint)
    out = _out_dir(args)
    rows = export_features(model, PatchSource(manifest, dtype=model.dtype), manifest.records,
                           args.layer, args.batch)
    write_features_csv(out / "features.csv", rows)
    print(json.dumps({"rows": len(rows), "dim": len(rows[0][2]) if rows else 0}))


COMMANDS = {"synth": cmd_synth, "crop": cmd_crop, "augment": cmd_augment, "train": cmd_train,
            "ral": cmd_ral, "eval": cmd_eval, "predict-slide": cmd_predict_slide,
            "features": cmd_features}


def _thread_limit() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InvalidInputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _fail(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code})
                     + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except PatchforgeError as exc:
        return _fail(exc, exc.exit_code)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        if args.command in STOCHASTIC and args.seed is None:
            raise ContractError(f"--seed is required for {args.command}")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_thread_limit()):
            COMMANDS[args.command](args)
    except PatchforgeError as exc:
        return _fail(exc, exc.exit_code)
    except FloatingPointError as exc:
        return _fail(exc, 5)
    except OSError as exc:
        return _fail(exc, 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
