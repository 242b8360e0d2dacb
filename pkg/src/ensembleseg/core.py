"""Domain types and elementary probability-map operations.

Arrays are stored channel-last: images are (H, W, channels), probability maps
are (H, W, classes), masks and binary maps are (H, W).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image

PROB_SUM_TOL = 1e-5
PMAP_MAGIC = b"PMAP"
_PMAP_HEADER = struct.Struct("<4sIII")


class InvalidArgumentError(ValueError):
    """Raised when an operation receives arguments that violate its contract."""


@dataclass(frozen=True)
class RasterImage:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3) or v.shape[0] < 1 or v.shape[1] < 1:
            raise InvalidArgumentError(f"image must be HxWx1 or HxWx3, got shape {np.shape(self.values)}")
        object.__setattr__(self, "values", v)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass(frozen=True)
class Mask:
    labels: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.labels)
        if m.ndim != 2:
            raise InvalidArgumentError(f"mask must be 2-D, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise InvalidArgumentError("mask entries must be 0 or 1")
        object.__setattr__(self, "labels", m.astype(np.uint8))

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]


@dataclass(frozen=True)
class ProbMap:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs)
        if p.ndim != 3 or p.shape[2] < 2:
            raise InvalidArgumentError(f"probability map must be HxWxC with C >= 2, got shape {p.shape}")
        object.__setattr__(self, "probs", p)

    @property
    def height(self):
        return self.probs.shape[0]

    @property
    def width(self):
        return self.probs.shape[1]

    @property
    def classes(self):
        return self.probs.shape[2]

    @property
    def pixel_count(self):
        return self.height * self.width

    def channel(self, c):
        if not 0 <= c < self.classes:
            raise InvalidArgumentError(f"class index {c} out of range for {self.classes} classes")
        return self.probs[:, :, c]

    @classmethod
    def from_mask(cls, mask: Mask, classes: int = 2, dtype=np.float32):
        return cls(np.eye(classes, dtype=dtype)[mask.labels])


@dataclass(frozen=True)
class Sample:
    id: str
    image: RasterImage
    mask: Optional[Mask] = None
    pseudo: Optional[ProbMap] = None

    def target(self, classes=2):
        """Training target: the hard one-hot mask if present, otherwise the pseudo label."""
        if self.mask is not None:
            return ProbMap.from_mask(self.mask, classes).probs
        if self.pseudo is not None:
            return self.pseudo.probs
        raise InvalidArgumentError(f"sample {self.id!r} has neither a mask nor a pseudo label")


def binarize(pmap: ProbMap, foreground_class=1, threshold=0.5):
    """Threshold the foreground channel; a probability equal to the threshold is foreground."""
    if not 0.0 < threshold < 1.0:
        raise InvalidArgumentError(f"threshold must lie in (0, 1), got {threshold}")
    return (pmap.channel(foreground_class) >= threshold).astype(np.uint8)


class ProbMapCheck(NamedTuple):
    ok: bool
    pixel: Optional[tuple] = None
    reason: str = ""

    def __bool__(self):
        return self.ok


def validate_probmap(pmap: ProbMap, tol=PROB_SUM_TOL):
    """Check range and sum-to-one invariants, reporting the first offending (row, col)."""
    p = np.asarray(pmap.probs, dtype=np.float64)
    bad_range = ~((p >= 0.0) & (p <= 1.0)).all(axis=2)
    bad_sum = np.abs(p.sum(axis=2) - 1.0) > tol
    bad = bad_range | bad_sum
    if not bad.any():
        return ProbMapCheck(True)
    r, c = np.unravel_index(int(np.argmax(bad.ravel())), bad.shape)
    reason = "probability outside [0, 1]" if bad_range[r, c] else "class probabilities do not sum to 1"
    return ProbMapCheck(False, (int(r), int(c)), reason)


def write_pmap(path, pmap: ProbMap):
    h, w, c = pmap.probs.shape
    payload = np.ascontiguousarray(pmap.probs, dtype="<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_PMAP_HEADER.pack(PMAP_MAGIC, w, h, c) + payload)


def read_pmap(path):
    raw = Path(path).read_bytes()
    if len(raw) < _PMAP_HEADER.size:
        raise InvalidArgumentError(f"{path}: truncated probability map header")
    magic, w, h, c = _PMAP_HEADER.unpack_from(raw)
    if magic != PMAP_MAGIC:
        raise InvalidArgumentError(f"{path}: bad magic {magic!r}")
    expected = _PMAP_HEADER.size + 4 * w * h * c
    if len(raw) != expected:
        raise InvalidArgumentError(f"{path}: expected {expected} bytes, found {len(raw)}")
    probs = np.frombuffer(raw, dtype="<f4", offset=_PMAP_HEADER.size).reshape(h, w, c)
    return ProbMap(probs.astype(np.float32))


def write_mask_png(path, mask: Mask):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.labels * np.uint8(255), mode="L").save(path)


def read_mask_png(path):
    arr = np.asarray(Image.open(path).convert("L"))
    return Mask((arr >= 128).astype(np.uint8))
