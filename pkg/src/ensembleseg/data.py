"""Dataset loading, preprocessing, seeded splits and a synthetic blob dataset."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .core import InvalidArgumentError, Mask, RasterImage, Sample, read_mask_png, write_mask_png

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
STD_FLOOR = 1e-8


class DatasetError(ValueError):
    pass


def _stems(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_image(path):
    img = Image.open(path)
    img = img.convert("L" if img.mode in ("L", "I", "I;16", "F") else "RGB")
    return RasterImage(np.asarray(img, dtype=np.float32) / 255.0)


def load_dataset(image_dir, mask_dir=None):
    """One ``Sample`` per image, ids from file stems, sorted lexicographically."""
    images = _stems(image_dir)
    if not images:
        raise DatasetError(f"no images found in {image_dir}")
    masks = _stems(mask_dir) if mask_dir is not None else {}
    if mask_dir is not None:
        missing = sorted(set(images) - set(masks))
        if missing:
            raise DatasetError(f"images without masks: {', '.join(missing)}")
    return [
        Sample(stem, load_image(images[stem]), read_mask_png(masks[stem]) if stem in masks else None)
        for stem in sorted(images)
    ]


def _resize_channel(ch, size):
    return np.asarray(Image.fromarray(ch.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR))


def zero_mean_normalize(values):
    v = np.asarray(values, dtype=np.float64)
    mean = v.mean(axis=(0, 1), keepdims=True)
    std = v.std(axis=(0, 1), keepdims=True)
    if (std < STD_FLOOR).any():
        warnings.warn("constant image channel; normalizing with std floor", RuntimeWarning, stacklevel=2)
        std = np.maximum(std, STD_FLOOR)
    return ((v - mean) / std).astype(np.float32)


def preprocess(image: RasterImage, mask: Optional[Mask] = None, target_size=128):
    """Bilinear resize + per-image, per-channel z-normalization; masks use nearest neighbour."""
    v = image.values
    if v.shape[:2] != (target_size, target_size):
        v = np.stack([_resize_channel(v[:, :, c], target_size) for c in range(v.shape[2])], axis=2)
    out_image = RasterImage(zero_mean_normalize(v))
    if mask is None:
        return out_image, None
    m = mask.labels
    if m.shape != (target_size, target_size):
        m = np.asarray(Image.fromarray(m, mode="L").resize((target_size, target_size), Image.NEAREST))
    return out_image, Mask(m)


def preprocess_samples(samples, target_size):
    out = []
    for s in samples:
        img, m = preprocess(s.image, s.mask, target_size)
        out.append(Sample(s.id, img, m, s.pseudo))
    return out


@dataclass(frozen=True)
class SplitSpec:
    labeled_count: int = 100
    validation_count: int = 50
    test_fraction: float = 500 / 2594
    test_count: Optional[int] = None
    seed: int = 0


@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    validation: list
    test: list
    # ground truth of the unlabeled pool, kept out of training code paths
    unlabeled_truth: dict = field(default_factory=dict, repr=False)

    def ids(self):
        return {role: [s.id for s in getattr(self, role)] for role in ("labeled", "unlabeled", "validation", "test")}


def split(samples, spec: SplitSpec):
    """Seeded shuffle, then test / labeled / validation / unlabeled with exact counts."""
    n = len(samples)
    if len({s.id for s in samples}) != n:
        raise DatasetError("sample ids must be unique")
    if spec.test_count is not None:
        n_test = spec.test_count
    else:
        if not 0.0 < spec.test_fraction < 1.0:
            raise DatasetError(f"test_fraction must lie in (0, 1), got {spec.test_fraction}")
        n_test = int(round(n * spec.test_fraction))
    need = n_test + spec.labeled_count + spec.validation_count
    if min(n_test, spec.labeled_count, spec.validation_count) < 0 or need > n:
        raise DatasetError(
            f"split needs {need} samples (test {n_test} + labeled {spec.labeled_count} + "
            f"validation {spec.validation_count}) but only {n} are available")
    order = np.random.default_rng(spec.seed).permutation(n)
    ordered = [sorted(samples, key=lambda s: s.id)[i] for i in order]
    test = ordered[:n_test]
    labeled = ordered[n_test:n_test + spec.labeled_count]
    validation = ordered[n_test + spec.labeled_count:need]
    rest = ordered[need:]
    truth = {s.id: s.mask for s in rest if s.mask is not None}
    unlabeled = [Sample(s.id, s.image) for s in rest]
    return DatasetSplit(labeled, unlabeled, validation, test, truth)


def write_split(path, ds: DatasetSplit):
    Path(path).write_text(json.dumps(ds.ids(), indent=1))


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 260
    image_size: int = 64
    blob_count: tuple = (1, 3)
    contrast: tuple = (0.25, 0.6)
    noise: float = 0.08
    edge: float = 0.08
    distractors: int = 3
    depth: int = 5
    seed: int = 0

    def validate(self):
        div = 2 ** (self.depth - 1)
        if self.image_size < div or self.image_size % div:
            raise InvalidArgumentError(f"image_size {self.image_size} must be a positive multiple of {div}")
        lo, hi = self.blob_count
        if self.count < 0 or lo < 1 or hi < lo:
            raise InvalidArgumentError(f"invalid synthetic spec {self}")
        return self


def _ellipse_radius(size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    ry, rx = rng.uniform(0.08, 0.22, 2) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return np.sqrt((u / rx) ** 2 + (v / ry) ** 2)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def synth_sample(idx, spec: SyntheticSpec, rng):
    size = spec.image_size
    n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    shape = np.zeros((size, size))
    support = np.zeros((size, size), dtype=bool)
    for _ in range(n_blobs):
        r = _ellipse_radius(size, rng)
        shape = np.maximum(shape, _sigmoid((1.0 - r) / spec.edge))
        support |= r <= 1.0

    yy, xx = np.mgrid[0:size, 0:size] / size
    gy, gx = rng.uniform(-0.15, 0.15, 2)
    background = rng.uniform(0.2, 0.35) + gy * (yy - 0.5) + gx * (xx - 0.5)
    dark = np.zeros((size, size))
    for _ in range(int(rng.integers(0, spec.distractors + 1))):
        dark = np.maximum(dark, _sigmoid((1.0 - _ellipse_radius(size, rng) * 2.0) / spec.edge))
    contrast = rng.uniform(*spec.contrast)
    gray = background - 0.15 * dark + contrast * shape
    tint = rng.uniform(0.75, 1.0, 3)
    img = gray[:, :, None] * tint[None, None, :]
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(f"synth_{idx:04d}", RasterImage(img), Mask(support.astype(np.uint8)))


def synth_generate(spec: SyntheticSpec):
    """Images with 1..k soft-edged bright ellipses on a shaded background; masks are the supports."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    return [synth_sample(i, spec, rng) for i in range(spec.count)]


def write_dataset(samples, out_dir):
    """``images/<id>.png`` (8-bit) and ``masks/<id>.png`` ({0, 255})."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        arr = np.round(np.clip(s.image.values, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr if arr.shape[2] == 3 else arr[:, :, 0]).save(out_dir / "images" / f"{s.id}.png")
        if s.mask is not None:
            write_mask_png(out_dir / "masks" / f"{s.id}.png", s.mask)
