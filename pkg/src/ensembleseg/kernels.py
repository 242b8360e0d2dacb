"""Backend selection for the fusion/metrics inner loops.

The compiled extension is used when it was built; set ``ENSEMBLESEG_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ENSEMBLESEG_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass


def get_backend(name=None):
    """Return the kernel module named ``name`` ("cython" or "python"), default: active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def consensus(fg):
    return _impl.consensus(_f64(fg))


def agreement_weights(fg, threshold):
    return _impl.agreement_weights(_f64(fg), float(threshold))


def weighted_sum(maps, weights):
    return _impl.weighted_sum(_f64(maps), _f64(weights))


def confusion_counts(pred, gt):
    pred = np.ascontiguousarray(pred, dtype=np.uint8).ravel()
    gt = np.ascontiguousarray(gt, dtype=np.uint8).ravel()
    return tuple(int(v) for v in _impl.confusion_counts(pred, gt))
