"""Command-line entry point: ``ensembleseg {plan,train,evaluate,fuse,synth}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
from filelock import FileLock, Timeout

from . import data as data_mod
from . import fusion, pipeline
from .core import InvalidArgumentError, read_pmap, write_pmap
from .metrics import evaluate
from .model import ConfigError, IntegrityError, as_predictor, load_checkpoint
from .schedule import plan_levels

log = logging.getLogger("ensembleseg")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SEED_ENV = "ENSEMBLESEG_SEED"


class UsageError(Exception):
    pass


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_INT = {"type": "integer"}
_NUM = {"type": "number"}
_PAIR_INT = {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2}
_PAIR_NUM = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

SYNTHETIC_SCHEMA = _obj({
    "count": _INT, "image_size": _INT, "blob_count": _PAIR_INT, "contrast": _PAIR_NUM,
    "noise": _NUM, "edge": _NUM, "distractors": _INT, "depth": _INT, "seed": _INT,
})
_TRAIN_SCHEMA = _obj({
    "max_epochs": _INT, "batch_size": _INT, "learning_rate": _NUM, "dropout_rate": _NUM,
    "early_stop_patience": {"type": ["integer", "null"]}, "seed": _INT,
    "ce_weight": _NUM, "dice_weight": _NUM,
})
CONFIG_SCHEMA = _obj({
    "run_dir": {"type": "string"},
    "data": {"oneOf": [
        _obj({"image_dir": {"type": "string"}, "mask_dir": {"type": "string"}}, ["image_dir", "mask_dir"]),
        _obj({"synthetic": SYNTHETIC_SCHEMA}, ["synthetic"]),
    ]},
    "split": _obj({"labeled_count": _INT, "validation_count": _INT, "test_fraction": _NUM,
                   "test_count": {"type": ["integer", "null"]}, "seed": _INT}),
    "backbone": _obj({"depth": _INT, "root_features": _INT, "classes": _INT, "dropout_rate": _NUM,
                      "input_size": _INT, "in_channels": _INT}),
    "s1": _INT,
    "seed": _INT,
    "train": _obj({k: _TRAIN_SCHEMA for k in ("initial", "submodel", "fs_baseline", "self_training")}),
    "self_training_iterations": _INT,
    "threshold": _NUM,
    "foreground_class": _INT,
    "workers": _INT,
    "log_level": {"enum": ["DEBUG", "INFO", "WARNING", "ERROR"]},
}, ["run_dir", "data"])


def load_config(path):
    """Read, schema-check and build an ``ExperimentConfig``; relative paths resolve against the file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise UsageError(f"config {path}: {exc.message}") from exc
    base = path.parent
    doc["run_dir"] = str(base / doc["run_dir"])
    for k in ("image_dir", "mask_dir"):
        if k in doc["data"]:
            doc["data"][k] = str(base / doc["data"][k])
    if os.environ.get(SEED_ENV):
        try:
            doc["seed"] = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer") from exc
    level = doc.get("log_level", "INFO")
    try:
        cfg = pipeline.ExperimentConfig.from_dict(doc).validate()
    except (TypeError, InvalidArgumentError, ConfigError) as exc:
        raise UsageError(f"config {path}: {exc}") from exc
    return cfg, level


def cmd_plan(args):
    try:
        plan = plan_levels(args.s1, args.n0)
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from exc
    if args.json:
        print(json.dumps(plan.to_dict(), indent=1))
    else:
        print(f"{'level':>5} {'S_n':>5} {'N_n':>7}")
        for lv in plan.levels:
            print(f"{lv.level_index:>5} {lv.submodel_count:>5} {lv.subset_size:>7}")
    return EXIT_OK


def _write_report(run_dir, name, report):
    out = Path(run_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / f"{name}.json")
    report.to_csv(out / f"{name}.csv")


def cmd_train(args):
    cfg, level = load_config(args.config)
    logging.getLogger().setLevel(level)
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if args.resume and not (run_dir / "manifest.json").exists():
        raise UsageError(f"--resume given but {run_dir / 'manifest.json'} does not exist")
    try:
        with FileLock(str(run_dir / ".lock"), timeout=0):
            ds = pipeline.prepare_data(cfg)
            if args.mode == "semi":
                ckpt, manifest = pipeline.run_semi_supervised(cfg, ds, resume=args.resume)
                seconds = manifest.training_seconds
            elif args.mode == "fs":
                ckpt = pipeline.run_fully_supervised(cfg, ds.labeled, ds.validation)
                data_mod.write_split(run_dir / "split.json", ds)
                manifest, seconds = None, ckpt.training_meta["seconds"]
            else:
                ckpt = pipeline.run_self_training_baseline(cfg, ds)
                data_mod.write_split(run_dir / "split.json", ds)
                manifest, seconds = None, ckpt.training_meta["seconds"]
            report = evaluate(ckpt.to_model(), ds.test, cfg.threshold, cfg.foreground_class, method=args.mode)
            report.training_seconds = seconds
            _write_report(run_dir, args.mode, report)
            if manifest is not None:
                manifest.metrics["semi"] = {"mean": report.mean, "std": report.std}
                manifest.save(run_dir)
            print(f"{args.mode}: {report.summary()}")
    except Timeout:
        print(f"error: run directory {run_dir} is locked by another process", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_evaluate(args):
    ckpt = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    samples = data_mod.load_dataset(data_dir / "images", data_dir / "masks")
    if args.split:
        wanted = set(json.loads(Path(args.split).read_text())[args.role])
        samples = [s for s in samples if s.id in wanted]
    samples = data_mod.preprocess_samples(samples, ckpt.config.input_size)
    report = evaluate(ckpt.to_model(), samples, args.threshold, method=args.method or ckpt.name)
    out = Path(args.out)
    report.to_json(out)
    report.to_csv(out.with_suffix(".csv"))
    print(report.summary())
    return EXIT_OK


def cmd_fuse(args):
    """``--maps`` holds one subdirectory per sub-model, each with ``<id>.pmap`` per image."""
    maps_dir = Path(args.maps)
    if not maps_dir.is_dir():
        raise UsageError(f"{maps_dir} is not a directory")
    model_dirs = sorted(p for p in maps_dir.iterdir() if p.is_dir())
    if not model_dirs:
        raise UsageError(f"{maps_dir} contains no sub-model directories")
    ids = sorted({p.stem for d in model_dirs for p in d.glob("*.pmap")})
    out = Path(args.out)
    labels = []
    for sid in ids:
        paths = [d / f"{sid}.pmap" for d in model_dirs]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise RuntimeError(f"image {sid}: missing maps {', '.join(missing)}")
        maps = [read_pmap(p) for p in paths]
        try:
            labels.append(fusion.fuse_image(maps, args.foreground_class, args.threshold))
        except InvalidArgumentError as exc:
            raise RuntimeError(f"image {sid}: {exc}") from exc
    fusion.save_pseudo_labels(out, ids, labels)
    print(f"fused {len(ids)} images from {len(model_dirs)} sub-models into {out}")
    return EXIT_OK


def cmd_synth(args):
    try:
        doc = json.loads(Path(args.spec).read_text())
        jsonschema.validate(doc, SYNTHETIC_SCHEMA)
        for k in ("blob_count", "contrast"):
            if k in doc:
                doc[k] = tuple(doc[k])
        spec = data_mod.SyntheticSpec(**doc).validate()
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError, InvalidArgumentError) as exc:
        raise UsageError(f"invalid synthetic spec: {getattr(exc, 'message', exc)}") from exc
    samples = data_mod.synth_generate(spec)
    data_mod.write_dataset(samples, args.out)
    Path(args.out, "spec.json").write_text(json.dumps(dataclasses.asdict(spec), indent=1))
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ensembleseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("plan", help="print the level plan")
    sp.add_argument("--s1", type=int, required=True, help="sub-models at level 1 (power of two)")
    sp.add_argument("--n0", type=int, required=True, help="number of unlabeled images")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("train", help="run an experiment from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--mode", choices=("semi", "fs", "self-train"), default="semi")
    sp.add_argument("--resume", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a dataset directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="directory with images/ and masks/")
    sp.add_argument("--out", required=True, help="report JSON path (CSV written alongside)")
    sp.add_argument("--split", help="split.json from a run; restricts to --role")
    sp.add_argument("--role", default="test", choices=("labeled", "unlabeled", "validation", "test"))
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--method", default=None)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("fuse", help="fuse per-sub-model probability maps offline")
    sp.add_argument("--maps", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--foreground-class", type=int, default=1)
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("synth", help="write a synthetic blob dataset")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
