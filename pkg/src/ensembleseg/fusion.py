"""Agreement-weighted fusion of sub-model probability maps into pseudo labels.

For one unlabeled image and S sub-models:

* consensus ``C = sum_i fg_i`` (per pixel),
* raw weight ``w_i = sum_j [fg_i(j) >= t] * C(j)``,
* rescale to [0.1, 1] by min-max, then divide by the sum,
* fused label ``P = sum_i w_i M_i`` applied to every class channel.

Weights are computed independently for every image.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .core import InvalidArgumentError, ProbMap, write_pmap

WEIGHT_FLOOR = 0.1


@dataclass(frozen=True)
class PseudoLabel:
    map: ProbMap
    source_level: int
    weights_used: np.ndarray


class InferenceError(RuntimeError):
    def __init__(self, sample_id, cause):
        super().__init__(f"inference failed on sample {sample_id!r}: {cause}")
        self.sample_id = sample_id


def _check_shapes(maps):
    if not maps:
        raise InvalidArgumentError("need at least one probability map")
    shape = maps[0].probs.shape
    for i, m in enumerate(maps[1:], start=1):
        if m.probs.shape != shape:
            raise InvalidArgumentError(f"map {i} has shape {m.probs.shape}, expected {shape}")
    return shape


def _foreground_stack(maps, foreground_class):
    _check_shapes(maps)
    return np.stack([m.channel(foreground_class).ravel() for m in maps])


def consensus(maps, foreground_class=1):
    """Per-pixel sum of foreground probabilities across ``maps``, shape (H, W)."""
    shape = _check_shapes(maps)
    return kernels.consensus(_foreground_stack(maps, foreground_class)).reshape(shape[:2])


def raw_weights(maps, foreground_class=1, threshold=0.5):
    if not 0.0 < threshold < 1.0:
        raise InvalidArgumentError(f"threshold must lie in (0, 1), got {threshold}")
    return kernels.agreement_weights(_foreground_stack(maps, foreground_class), threshold)


def rescale_weights(w):
    """Min-max rescale into [0.1, 1]; all-equal weights map to 1.0."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise InvalidArgumentError("empty weight vector")
    lo, hi = w.min(), w.max()
    if hi == lo:
        return np.ones_like(w)
    return (w - lo) / (hi - lo) * (1.0 - WEIGHT_FLOOR) + WEIGHT_FLOOR


def normalize_weights(w):
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0 or (w <= 0).any():
        raise InvalidArgumentError(f"weights must be strictly positive, got {w.tolist()}")
    return w / w.sum()


def image_weights(maps, foreground_class=1, threshold=0.5):
    """Full weight pipeline for one image: raw agreement, rescale, normalize."""
    return normalize_weights(rescale_weights(raw_weights(maps, foreground_class, threshold)))


def fuse(maps, w, source_level=0):
    shape = _check_shapes(maps)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(maps),):
        raise InvalidArgumentError(f"{len(maps)} maps but {w.size} weights")
    flat = np.stack([np.asarray(m.probs, dtype=np.float64).ravel() for m in maps])
    fused = kernels.weighted_sum(flat, w).reshape(shape)
    return PseudoLabel(ProbMap(fused), source_level, w)


def fuse_image(maps, foreground_class=1, threshold=0.5, source_level=0):
    return fuse(maps, image_weights(maps, foreground_class, threshold), source_level)


def generate_pseudo_labels(models, unlabeled, foreground_class=1, threshold=0.5,
                           source_level=0, chunk_size=64):
    """Fused pseudo label for every sample in ``unlabeled``, in input order.

    ``models`` are predictors: callables mapping a list of ``RasterImage`` to a list
    of ``ProbMap`` (see ``model.as_predictor``). Images are processed in chunks so
    that only ``chunk_size x len(models)`` maps are alive at once.
    """
    if not models:
        raise InvalidArgumentError("need at least one model")
    out = []
    for start in range(0, len(unlabeled), chunk_size):
        chunk = unlabeled[start:start + chunk_size]
        per_model = [_predict_chunk(m, chunk) for m in models]
        for k, sample in enumerate(chunk):
            maps = [pm[k] for pm in per_model]
            if len(maps) == 1:
                out.append(PseudoLabel(maps[0], source_level, np.ones(1)))
            else:
                out.append(fuse_image(maps, foreground_class, threshold, source_level))
    return out


def _predict_chunk(model, chunk):
    try:
        return model([s.image for s in chunk])
    except Exception as exc:
        # locate the failing sample so the caller sees which id broke
        for s in chunk:
            try:
                model([s.image])
            except Exception as inner:
                raise InferenceError(s.id, inner) from inner
        raise InferenceError(chunk[0].id if chunk else "?", exc) from exc


def save_pseudo_labels(level_dir, ids, labels):
    """Write ``<id>.pmap`` files plus ``weights.json`` mapping id to the weights used."""
    level_dir = Path(level_dir)
    level_dir.mkdir(parents=True, exist_ok=True)
    weights = {}
    for sid, lab in zip(ids, labels):
        write_pmap(level_dir / f"{sid}.pmap", lab.map)
        weights[sid] = [float(x) for x in lab.weights_used]
    (level_dir / "weights.json").write_text(json.dumps(weights, indent=1))
