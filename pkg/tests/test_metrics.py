import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ensembleseg.core import InvalidArgumentError, Mask, ProbMap, RasterImage, Sample
from ensembleseg.data import SyntheticSpec, synth_generate
from ensembleseg.metrics import (Confusion, accuracy, all_metrics, confusion, dice, evaluate, iou,
                                 paired_t_test, sensitivity, specificity)

from oracles import textbook_paired_t


def test_confusion_examples():
    gt = np.zeros((4, 4), np.uint8)
    gt.flat[:5] = 1
    assert confusion(gt, Mask(gt)) == Confusion(5, 0, 0, 11)
    c = confusion(1 - gt, Mask(gt))
    assert c.tp == 0 and c.tn == 0
    gt = np.zeros((4, 4), np.uint8)
    gt.flat[:4] = 1
    pred = np.zeros((4, 4), np.uint8)
    pred.flat[:2] = 1
    assert confusion(pred, gt) == Confusion(2, 0, 2, 12)
    with pytest.raises(InvalidArgumentError):
        confusion(pred, gt[:3])


def test_metric_values():
    c = Confusion(2, 0, 2, 12)
    assert math.isclose(dice(c), 4 / 6, rel_tol=1e-12)
    assert iou(c) == 0.5 and accuracy(c) == 0.875 and sensitivity(c) == 0.5 and specificity(c) == 1.0
    assert all(v == 1.0 for v in all_metrics(Confusion(5, 0, 0, 11)).values())
    assert all(v == 1.0 for v in all_metrics(Confusion(0, 0, 0, 16)).values())
    one_sided = Confusion(0, 3, 0, 13)
    assert dice(one_sided) == 0.0 and iou(one_sided) == 0.0


@settings(max_examples=500, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_dice_iou_identity(tp, fp, fn, tn):
    c = Confusion(tp, fp, fn, tn)
    if tp + fp + fn == 0:
        return
    j = iou(c)
    assert math.isclose(dice(c), 2 * j / (1 + j), rel_tol=1e-12, abs_tol=1e-15)
    assert all(0.0 <= v <= 1.0 for v in all_metrics(c).values())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dice_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = (rng.random((6, 6)) > 0.5).astype(np.uint8)
    b = (rng.random((6, 6)) > 0.5).astype(np.uint8)
    assert dice(confusion(a, b)) == dice(confusion(b, a))


def test_paired_t_test_worked_example():
    diffs = [0.1, 0.2, 0.15, 0.05]
    b = np.array([0.5, 0.6, 0.7, 0.8])
    res = paired_t_test(b + diffs, b)
    assert math.isclose(res.t, textbook_paired_t(diffs), rel_tol=1e-9)
    # mean 0.125, sd sqrt(0.0125/3), t = sqrt(15)
    assert math.isclose(res.t, math.sqrt(15), rel_tol=1e-9)
    assert math.isclose(res.p, stats.ttest_rel(b + diffs, b).pvalue, rel_tol=1e-9)
    assert 0 < res.p <= 1


def test_paired_t_test_degenerate():
    a = [0.3, 0.4, 0.5]
    assert paired_t_test(a, a) == (0.0, 1.0, True)
    shifted = paired_t_test(np.array(a) + 0.1, a)
    assert shifted.degenerate and shifted.p == 0.0 and shifted.t == math.inf
    with pytest.raises(InvalidArgumentError):
        paired_t_test([1.0], [2.0])


def _perfect(samples):
    lookup = {id(s.image): s.mask for s in samples}

    def predict(images):
        return [ProbMap(np.eye(2)[lookup[id(im)].labels]) for im in images]

    return predict


def test_evaluate_perfect_and_background():
    samples = synth_generate(SyntheticSpec(count=6, image_size=16, seed=2))
    rep = evaluate(_perfect(samples), samples)
    assert all(rep.mean[m] == 1.0 and rep.std[m] == 0.0 for m in rep.mean)
    background = lambda images: [ProbMap(np.tile([1.0, 0.0], (16, 16, 1))) for _ in images]
    rep = evaluate(background, samples)
    assert rep.mean["sensitivity"] == 0.0
    with pytest.raises(InvalidArgumentError, match="x"):
        evaluate(background, [Sample("x", RasterImage(np.zeros((16, 16, 3))))])


def test_evaluate_threshold_oracle_model():
    from test_data import threshold_oracle

    spec = SyntheticSpec(count=50, image_size=64, noise=0.0, contrast=(0.55, 0.55), edge=0.02, distractors=0, seed=8)
    samples = synth_generate(spec)

    def oracle_model(images):
        return [ProbMap(np.eye(2)[threshold_oracle(im)]) for im in images]

    rep = evaluate(oracle_model, samples)
    assert rep.mean["dice"] > 0.99
    assert all(min(v[m] for v in rep.per_image.values()) <= rep.mean[m] <= max(v[m] for v in rep.per_image.values())
               for m in rep.mean)


def test_report_files(tmp_path):
    samples = synth_generate(SyntheticSpec(count=3, image_size=16, seed=2))
    rep = evaluate(_perfect(samples), samples, method="semi")
    rep.training_seconds = 12.5
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    header, row = (tmp_path / "r.csv").read_text().splitlines()
    assert header == "method,DC,IoU,Accuracy,Sensitivity,Specificity,training time (s)"
    assert row.startswith("semi,1.000000") and row.endswith("12.5")
