import json
from dataclasses import replace

import numpy as np
import pytest

from ensembleseg import pipeline
from ensembleseg.core import read_pmap
from ensembleseg.data import SplitSpec, SyntheticSpec
from ensembleseg.model import as_predictor, load_checkpoint, parameters_equal
from ensembleseg.training import TrainConfig


def tiny_config(run_dir, s1=4, seed=0, count=40):
    return pipeline.ExperimentConfig(
        run_dir=str(run_dir),
        synthetic=SyntheticSpec(count=count, image_size=16, depth=2, seed=seed),
        split=SplitSpec(labeled_count=6, validation_count=4, test_count=6, seed=seed),
        backbone=pipeline.BackboneConfig(depth=2, root_features=4, input_size=16),
        s1=s1, seed=seed,
        initial=TrainConfig(max_epochs=3, batch_size=3, learning_rate=1e-3, dropout_rate=0.25, early_stop_patience=2),
        submodel=TrainConfig(max_epochs=2, batch_size=1, learning_rate=1e-3, early_stop_patience=2),
        fs_baseline=TrainConfig(max_epochs=3, batch_size=3, learning_rate=1e-3, dropout_rate=0.25,
                                early_stop_patience=None),
        self_training=TrainConfig(max_epochs=2, batch_size=4, learning_rate=1e-3, early_stop_patience=None),
    )


@pytest.fixture(scope="module")
def semi_run(tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("semi"))
    ds = pipeline.prepare_data(cfg)
    final, manifest = pipeline.run_semi_supervised(cfg, ds)
    return cfg, ds, final, manifest


def test_levels_and_manifest(semi_run):
    cfg, ds, final, manifest = semi_run
    assert [manifest.levels[k]["submodels"] for k in ("1", "2", "3")] == [4, 2, 1]
    on_disk = json.loads((pipeline.Path(cfg.run_dir) / "manifest.json").read_text())
    assert on_disk["stages"]["final"].endswith("3_0.ckpt")
    assert final.lineage["level_index"] == 3
    assert set(manifest.timings) >= {"L0", "pseudo_0", "L1", "pseudo_1", "L2", "pseudo_2", "L3"}
    assert "3" not in manifest.pseudo


def test_bootstrap_identity(semi_run):
    cfg, ds, _, manifest = semi_run
    m0 = load_checkpoint(manifest.stages["m0"]).to_model()
    raw = as_predictor(m0)([s.image for s in ds.unlabeled])
    for s, pm in zip(ds.unlabeled, raw):
        stored = read_pmap(pipeline.Path(manifest.pseudo["0"]) / f"{s.id}.pmap")
        assert np.abs(stored.probs - pm.probs).max() <= 1e-6
    weights = json.loads((pipeline.Path(manifest.pseudo["0"]) / "weights.json").read_text())
    assert all(w == [1.0] for w in weights.values())


def test_level_one_starts_from_m0(semi_run):
    _, _, _, manifest = semi_run
    for p in manifest.levels["1"]["checkpoints"]:
        assert load_checkpoint(p).lineage["parent"] == "M0"
    parents = manifest.levels["2"]["parents"]
    assert len(set(parents)) == 2 and all(0 <= p < 4 for p in parents)


def test_fused_weights_recorded(semi_run):
    _, _, _, manifest = semi_run
    weights = json.loads((pipeline.Path(manifest.pseudo["1"]) / "weights.json").read_text())
    assert all(len(w) == 4 and abs(sum(w) - 1) < 1e-9 for w in weights.values())


def test_final_level_sees_all_unlabeled(semi_run):
    cfg, ds, _, _ = semi_run
    plan = json.loads((pipeline.Path(cfg.run_dir) / "plan.json").read_text())
    assert sorted(plan["assignments"]["3"][0]) == sorted(s.id for s in ds.unlabeled)


def test_resume_is_bit_exact(semi_run, tmp_path):
    cfg, ds, final, _ = semi_run
    other = replace(cfg, run_dir=str(tmp_path / "resumed"))
    with pytest.raises(pipeline.RunInterrupted):
        pipeline.run_semi_supervised(other, ds, stop_after_level=1)
    with pytest.raises(pipeline.RunInterrupted):
        pipeline.run_semi_supervised(other, ds, resume=True, stop_after_level=2)
    resumed, manifest = pipeline.run_semi_supervised(other, ds, resume=True)
    assert parameters_equal(resumed, final)


def test_resume_rejects_other_config(semi_run, tmp_path):
    cfg, ds, _, _ = semi_run
    other = replace(cfg, run_dir=str(tmp_path / "r"))
    with pytest.raises(pipeline.RunInterrupted):
        pipeline.run_semi_supervised(other, ds, stop_after_level=1)
    with pytest.raises(pipeline.InvalidArgumentError):
        pipeline.run_semi_supervised(replace(other, seed=99), ds, resume=True)


def test_parallel_workers_match_serial(semi_run, tmp_path):
    cfg, ds, final, _ = semi_run
    par, _ = pipeline.run_semi_supervised(replace(cfg, run_dir=str(tmp_path / "par"), workers=2), ds)
    assert parameters_equal(par, final)


def test_single_level_schedule(tmp_path):
    cfg = tiny_config(tmp_path, s1=1)
    final, manifest = pipeline.run_semi_supervised(cfg)
    assert list(manifest.levels) == ["1"] and manifest.levels["1"]["subset_size"] == 24
    assert final.lineage["parent"] == "M0"


def test_fully_supervised(tmp_path):
    cfg = tiny_config(tmp_path)
    ds = pipeline.prepare_data(cfg)
    ckpt = pipeline.run_fully_supervised(cfg, ds.labeled, ds.validation)
    assert ckpt.training_meta["epochs_run"] == 3
    one = pipeline.run_fully_supervised(cfg, ds.labeled[:1], tag="fs1")
    assert one.training_meta["epochs_run"] == 3
    with pytest.raises(pipeline.InvalidArgumentError):
        pipeline.run_fully_supervised(cfg, [])


def test_self_training_baseline(tmp_path):
    cfg = tiny_config(tmp_path)
    ds = pipeline.prepare_data(cfg)
    ckpt = pipeline.run_self_training_baseline(cfg, ds, iterations=1)
    assert ckpt.lineage["level_index"] == 1 and ckpt.training_meta["epochs_run"] == 2
    no_unlabeled = replace(ds, unlabeled=[])
    base = pipeline.run_self_training_baseline(replace(cfg, run_dir=str(tmp_path / "b")), no_unlabeled)
    assert base.lineage["level_index"] == 0
