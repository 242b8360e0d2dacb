"""End-to-end runs: the level-wise ensemble procedure and the two comparison baselines.

Run directory layout::

    manifest.json  plan.json  split.json
    checkpoints/<level>_<idx>.ckpt{,.json}     level 0 is the initial model
    pseudo/level_<n>/<id>.pmap, weights.json   labels produced after level n
    curves/<level>_<idx>.csv
    reports/<method>.{json,csv}
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import data as data_mod
from .core import InvalidArgumentError, ProbMap, Sample, read_pmap
from .fusion import generate_pseudo_labels, save_pseudo_labels
from .model import BackboneConfig, ModelCheckpoint, as_predictor, build_backbone, copy_model, load_checkpoint, save_checkpoint
from .schedule import assign_subsets, derive_seed, plan_levels, select_parents, write_plan
from .training import FULLY_SUPERVISED, INITIAL, SELF_TRAINING, SUBMODEL, TrainConfig, train, write_curve

log = logging.getLogger(__name__)

# keys mixed into derive_seed so every random decision has its own stream
_INIT, _TRAIN_M0, _TRAIN_SUB, _PARENTS, _SUBSETS, _TRAIN_FS, _TRAIN_ST = range(7)


class RunInterrupted(RuntimeError):
    """Raised when a run is deliberately stopped after a level (used to exercise resume)."""


@dataclass
class ExperimentConfig:
    run_dir: str
    image_dir: Optional[str] = None
    mask_dir: Optional[str] = None
    synthetic: Optional[data_mod.SyntheticSpec] = None
    split: data_mod.SplitSpec = field(default_factory=data_mod.SplitSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    s1: int = 16
    seed: int = 0
    initial: TrainConfig = INITIAL
    submodel: TrainConfig = SUBMODEL
    fs_baseline: TrainConfig = FULLY_SUPERVISED
    self_training: TrainConfig = SELF_TRAINING
    self_training_iterations: int = 3
    threshold: float = 0.5
    foreground_class: int = 1
    workers: int = 1

    def validate(self):
        if self.synthetic is None:
            for p in (self.image_dir, self.mask_dir):
                if p is None or not Path(p).is_dir():
                    raise InvalidArgumentError(f"data directory {p!r} does not exist")
        if self.s1 < 1 or self.s1 & (self.s1 - 1):
            raise InvalidArgumentError(f"s1 must be a power of two, got {self.s1}")
        self.backbone.validate()
        for tc in (self.initial, self.submodel, self.fs_baseline, self.self_training):
            tc.validate()
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        data = d.pop("data", {})
        kw = {}
        if "synthetic" in data:
            syn = dict(data["synthetic"])
            for k in ("blob_count", "contrast"):
                if k in syn:
                    syn[k] = tuple(syn[k])
            kw["synthetic"] = data_mod.SyntheticSpec(**syn)
        kw["image_dir"] = data.get("image_dir")
        kw["mask_dir"] = data.get("mask_dir")
        if "split" in d:
            kw["split"] = data_mod.SplitSpec(**d.pop("split"))
        if "backbone" in d:
            kw["backbone"] = BackboneConfig(**d.pop("backbone"))
        regimes = d.pop("train", {})
        defaults = {"initial": INITIAL, "submodel": SUBMODEL, "fs_baseline": FULLY_SUPERVISED,
                    "self_training": SELF_TRAINING}
        for name, base in defaults.items():
            if name in regimes:
                kw[name] = replace(base, **regimes[name])
        for k in ("log_level",):
            d.pop(k, None)
        return cls(**kw, **d)


@dataclass
class RunManifest:
    mode: str = "semi"
    seed: int = 0
    plan: Optional[dict] = None
    stages: dict = field(default_factory=dict)
    levels: dict = field(default_factory=dict)
    pseudo: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def save(self, run_dir):
        path = Path(run_dir) / "manifest.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(asdict(self), indent=1))
        tmp.replace(path)

    @classmethod
    def load(cls, run_dir):
        return cls(**json.loads((Path(run_dir) / "manifest.json").read_text()))

    @property
    def training_seconds(self):
        return float(sum(self.timings.values()))


def prepare_data(cfg: ExperimentConfig):
    if cfg.synthetic is not None:
        samples = data_mod.synth_generate(cfg.synthetic)
    else:
        samples = data_mod.load_dataset(cfg.image_dir, cfg.mask_dir)
    samples = data_mod.preprocess_samples(samples, cfg.backbone.input_size)
    return data_mod.split(samples, cfg.split)


def _seeded(tc: TrainConfig, base_seed, *keys):
    return replace(tc, seed=derive_seed(base_seed, *keys))


def _ckpt_path(run_dir, level, idx):
    return Path(run_dir) / "checkpoints" / f"{level}_{idx}.ckpt"


def _train_and_save(ckpt, labeled, pseudo, validation, tc, path, curve_path, lineage):
    net = ckpt.to_model()
    t0 = time.perf_counter()
    net, history = train(net, labeled, pseudo, validation, tc)
    seconds = time.perf_counter() - t0
    best = min((r.val_loss for r in history), default=float("nan"))
    out = ModelCheckpoint.from_model(net, lineage, {
        "epochs_run": len(history), "best_val_loss": best, "seconds": seconds})
    save_checkpoint(out, path)
    write_curve(curve_path, history)
    return str(path), seconds


def _fresh_checkpoint(cfg, lineage):
    net = build_backbone(cfg.backbone, derive_seed(cfg.seed, _INIT))
    return ModelCheckpoint.from_model(net, lineage)


def _pseudo_samples(unlabeled, labels):
    return [Sample(s.id, s.image, pseudo=labels[s.id]) for s in unlabeled]


def _load_pseudo(level_dir, ids):
    return {sid: read_pmap(Path(level_dir) / f"{sid}.pmap") for sid in ids}


def _make_pseudo(run_dir, models, unlabeled, level, cfg):
    labels = generate_pseudo_labels([as_predictor(m.to_model()) for m in models], unlabeled,
                                    cfg.foreground_class, cfg.threshold, source_level=level)
    level_dir = Path(run_dir) / "pseudo" / f"level_{level}"
    save_pseudo_labels(level_dir, [s.id for s in unlabeled], labels)
    # keep in-memory labels identical to what a resumed run reads back
    return {s.id: ProbMap(np.asarray(lab.map.probs, dtype=np.float32)) for s, lab in zip(unlabeled, labels)}, str(level_dir)


def _run_jobs(jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [_train_and_save(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
        return list(pool.map(_train_and_save_star, jobs))


def _train_and_save_star(job):
    torch.set_num_threads(1)
    return _train_and_save(*job)


def run_semi_supervised(cfg: ExperimentConfig, ds=None, resume=False, stop_after_level=None):
    """Initial model, then levels of sub-models with fused pseudo labels; returns the final model.

    With ``resume`` the finished stages recorded in ``manifest.json`` are reloaded
    from disk instead of being recomputed.
    """
    cfg.validate()
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ds = ds if ds is not None else prepare_data(cfg)
    data_mod.write_split(run_dir / "split.json", ds)
    unlabeled_ids = [s.id for s in ds.unlabeled]
    plan = plan_levels(cfg.s1, len(ds.unlabeled))

    if resume and (run_dir / "manifest.json").exists():
        manifest = RunManifest.load(run_dir)
        if manifest.plan != plan.to_dict() or manifest.seed != cfg.seed:
            raise InvalidArgumentError("manifest does not match this configuration; refusing to resume")
    else:
        manifest = RunManifest(mode="semi", seed=cfg.seed, plan=plan.to_dict())
        manifest.save(run_dir)

    # L0: initial supervised model
    if "m0" in manifest.stages:
        m0 = load_checkpoint(manifest.stages["m0"])
    else:
        log.info("L0: training initial model on %d labeled images", len(ds.labeled))
        path, secs = _train_and_save(
            _fresh_checkpoint(cfg, {"level_index": 0, "submodel_index": 0, "parent": None}),
            ds.labeled, [], ds.validation, _seeded(cfg.initial, cfg.seed, _TRAIN_M0),
            _ckpt_path(run_dir, 0, 0), run_dir / "curves" / "0_0.csv",
            {"level_index": 0, "submodel_index": 0, "parent": None})
        manifest.stages["m0"] = path
        manifest.timings["L0"] = secs
        manifest.save(run_dir)
        m0 = load_checkpoint(path)

    if "0" in manifest.pseudo:
        pseudo = _load_pseudo(manifest.pseudo["0"], unlabeled_ids)
    else:
        t0 = time.perf_counter()
        pseudo, level_dir = _make_pseudo(run_dir, [m0], ds.unlabeled, 0, cfg)
        manifest.pseudo["0"] = level_dir
        manifest.timings["pseudo_0"] = time.perf_counter() - t0
        manifest.save(run_dir)

    prev = [m0]
    assignments, parents_by_level = [], {}
    for spec in plan.levels:
        n = spec.level_index
        final = spec.submodel_count == 1 and n == len(plan.levels)
        if n == 1:
            parents = [0] * spec.submodel_count
        else:
            parents = select_parents(len(prev), spec.submodel_count, derive_seed(cfg.seed, _PARENTS, n))
        assignment = assign_subsets(unlabeled_ids, spec.subset_size, spec.submodel_count,
                                    derive_seed(cfg.seed, _SUBSETS), n)
        assignments.append(assignment)
        parents_by_level[n] = parents
        write_plan(run_dir / "plan.json", plan, assignments, parents_by_level)

        key = str(n)
        if key in manifest.levels:
            prev = [load_checkpoint(p) for p in manifest.levels[key]["checkpoints"]]
            if not final:
                pseudo = _load_pseudo(manifest.pseudo[key], unlabeled_ids)
            continue

        log.info("L%d: %d sub-models x %d pseudo-labeled images", n, spec.submodel_count, spec.subset_size)
        by_id = {s.id: s for s in ds.unlabeled}
        jobs = []
        for i in range(spec.submodel_count):
            lineage = {"level_index": n, "submodel_index": i, "parent": prev[parents[i]].name}
            start = copy_model(prev[parents[i]], lineage)
            subset = _pseudo_samples([by_id[sid] for sid in assignment.subsets[i]], pseudo)
            jobs.append((start, ds.labeled, subset, ds.validation,
                         _seeded(cfg.submodel, cfg.seed, _TRAIN_SUB, n, i),
                         _ckpt_path(run_dir, n, i), run_dir / "curves" / f"{n}_{i}.csv", lineage))
        t0 = time.perf_counter()
        results = _run_jobs(jobs, cfg.workers)
        manifest.timings[f"L{n}"] = time.perf_counter() - t0
        prev = [load_checkpoint(p) for p, _ in results]

        if not final:
            t0 = time.perf_counter()
            pseudo, level_dir = _make_pseudo(run_dir, prev, ds.unlabeled, n, cfg)
            manifest.pseudo[key] = level_dir
            manifest.timings[f"pseudo_{n}"] = time.perf_counter() - t0
        manifest.levels[key] = {"submodels": spec.submodel_count, "subset_size": spec.subset_size,
                                "parents": parents, "checkpoints": [p for p, _ in results]}
        manifest.save(run_dir)
        if stop_after_level is not None and n == stop_after_level and not final:
            raise RunInterrupted(f"stopped after level {n}")

    manifest.stages["final"] = manifest.levels[str(len(plan.levels))]["checkpoints"][0]
    manifest.save(run_dir)
    return prev[0], manifest


def run_fully_supervised(cfg: ExperimentConfig, labeled, validation=(), tag="fs"):
    """Single model under the fully-supervised regime, from the same initialization as M0."""
    if not labeled:
        raise InvalidArgumentError("fully supervised run needs at least one labeled sample")
    run_dir = Path(cfg.run_dir)
    lineage = {"level_index": 0, "submodel_index": 0, "parent": None, "method": tag}
    path, secs = _train_and_save(
        _fresh_checkpoint(cfg, lineage), list(labeled), [], list(validation),
        _seeded(cfg.fs_baseline, cfg.seed, _TRAIN_FS), run_dir / "checkpoints" / f"{tag}.ckpt",
        run_dir / "curves" / f"{tag}.csv", lineage)
    ckpt = load_checkpoint(path)
    ckpt.training_meta["seconds"] = secs
    return ckpt


def run_self_training_baseline(cfg: ExperimentConfig, ds=None, iterations=None):
    """Plain self-training: initial model, then repeatedly relabel with raw outputs and retrain."""
    cfg.validate()
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ds = ds if ds is not None else prepare_data(cfg)
    iterations = cfg.self_training_iterations if iterations is None else iterations
    lineage = {"level_index": 0, "submodel_index": 0, "parent": None, "method": "self-train"}
    path, total = _train_and_save(
        _fresh_checkpoint(cfg, lineage), ds.labeled, [], ds.validation,
        _seeded(cfg.initial, cfg.seed, _TRAIN_M0), run_dir / "checkpoints" / "st_0.ckpt",
        run_dir / "curves" / "st_0.csv", lineage)
    current = load_checkpoint(path)
    if not ds.unlabeled:
        return current
    for it in range(1, iterations + 1):
        labels = generate_pseudo_labels([as_predictor(current.to_model())], ds.unlabeled,
                                        cfg.foreground_class, cfg.threshold, source_level=it - 1)
        pseudo = _pseudo_samples(ds.unlabeled, {s.id: lab.map for s, lab in zip(ds.unlabeled, labels)})
        lin = {"level_index": it, "submodel_index": 0, "parent": current.name, "method": "self-train"}
        path, secs = _train_and_save(
            copy_model(current, lin), ds.labeled, pseudo, ds.validation,
            _seeded(cfg.self_training, cfg.seed, _TRAIN_ST, it),
            run_dir / "checkpoints" / f"st_{it}.ckpt", run_dir / "curves" / f"st_{it}.csv", lin)
        total += secs
        current = load_checkpoint(path)
    current.training_meta["seconds"] = total
    return current
