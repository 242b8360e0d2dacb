"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def consensus(fg):
    return np.asarray(fg, dtype=np.float64).sum(axis=0)


def agreement_weights(fg, threshold):
    fg = np.asarray(fg, dtype=np.float64)
    c = fg.sum(axis=0)
    return (fg >= threshold) @ c


def weighted_sum(maps, weights):
    maps = np.asarray(maps, dtype=np.float64)
    return np.asarray(weights, dtype=np.float64) @ maps


def confusion_counts(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn, pred.size - tp - fp - fn
