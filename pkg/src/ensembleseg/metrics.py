"""Overlap metrics, per-image evaluation and the paired t-test used for comparisons."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import stats

from . import kernels
from .core import InvalidArgumentError, binarize
from .model import as_predictor

METRIC_NAMES = ("dice", "iou", "accuracy", "sensitivity", "specificity")
CSV_COLUMNS = ("method", "DC", "IoU", "Accuracy", "Sensitivity", "Specificity", "training time (s)")


class Confusion(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(getattr(gt, "labels", gt))
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return Confusion(*kernels.confusion_counts(pred, gt))


def _ratio(num, den):
    # empty denominator: nothing to get wrong, counts as perfect
    return 1.0 if den == 0 else num / den


def dice(c: Confusion):
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def iou(c: Confusion):
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def accuracy(c: Confusion):
    return _ratio(c.tp + c.tn, c.total)


def sensitivity(c: Confusion):
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c: Confusion):
    return _ratio(c.tn, c.tn + c.fp)


def all_metrics(c: Confusion):
    return {"dice": dice(c), "iou": iou(c), "accuracy": accuracy(c),
            "sensitivity": sensitivity(c), "specificity": specificity(c)}


class TTestResult(NamedTuple):
    t: float
    p: float
    degenerate: bool = False


def paired_t_test(a, b):
    """Two-sided paired t-test on ``a - b``.

    Zero-variance differences are degenerate: all-zero gives ``t=0, p=1``; a
    constant nonzero shift gives ``t=±inf, p=0``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise InvalidArgumentError("paired t-test needs two equal-length sequences of >= 2 values")
    d = a - b
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0 or sd <= 1e-15 * max(abs(mean), 1.0):
        if mean == 0.0:
            return TTestResult(0.0, 1.0, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, True)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return TTestResult(float(t), float(min(max(p, np.finfo(float).tiny), 1.0)))


@dataclass
class MetricsReport:
    per_image: dict
    mean: dict
    std: dict
    count: int
    seconds: float = 0.0
    method: str = ""
    training_seconds: float = field(default=math.nan)

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1))

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            w.writerow([self.method, *(f"{self.mean[m]:.6f}" for m in METRIC_NAMES), f"{self.training_seconds:.1f}"])

    def summary(self):
        return ", ".join(f"{m} {self.mean[m]:.4f}±{self.std[m]:.4f}" for m in METRIC_NAMES)


def evaluate(model, test, threshold=0.5, foreground_class=1, method=""):
    """Per-image metrics of ``binarize(model(image))`` against each sample's mask."""
    missing = [s.id for s in test if s.mask is None]
    if missing:
        raise InvalidArgumentError(f"samples without ground truth: {', '.join(missing)}")
    predict = as_predictor(model)
    t0 = time.perf_counter()
    maps = predict([s.image for s in test]) if test else []
    per_image = {}
    for s, pm in zip(test, maps):
        per_image[s.id] = all_metrics(confusion(binarize(pm, foreground_class, threshold), s.mask))
    table = np.array([[v[m] for m in METRIC_NAMES] for v in per_image.values()]).reshape(-1, len(METRIC_NAMES))
    mean = {m: float(table[:, i].mean()) if len(table) else math.nan for i, m in enumerate(METRIC_NAMES)}
    std = {m: float(table[:, i].std()) if len(table) else math.nan for i, m in enumerate(METRIC_NAMES)}
    return MetricsReport(per_image, mean, std, len(per_image), time.perf_counter() - t0, method)
