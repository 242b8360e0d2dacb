# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for pseudo-label fusion and confusion counting.

Mirrors ``_kernels_py`` function for function; ``kernels`` picks one at import.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def consensus(const double[:, ::1] fg):
    """Per-pixel sum of foreground probabilities over sub-models, ``fg`` is (S, R)."""
    cdef Py_ssize_t s_count = fg.shape[0], r_count = fg.shape[1], i, j
    out = np.zeros(r_count, dtype=np.float64)
    cdef double[::1] c = out
    for i in range(s_count):
        for j in range(r_count):
            c[j] += fg[i, j]
    return out


def agreement_weights(const double[:, ::1] fg, double threshold):
    """Raw agreement weight per sub-model: sum of consensus over its foreground pixels."""
    cdef Py_ssize_t s_count = fg.shape[0], r_count = fg.shape[1], i, j
    cdef double acc
    cdef double[::1] c = consensus(fg)
    # threshold into a 0/1 row first so the dot product below vectorizes
    cdef double[::1] hit = np.empty(r_count, dtype=np.float64)
    out = np.empty(s_count, dtype=np.float64)
    cdef double[::1] w = out
    for i in range(s_count):
        for j in range(r_count):
            hit[j] = 1.0 if fg[i, j] >= threshold else 0.0
        acc = 0.0
        for j in range(r_count):
            acc += hit[j] * c[j]
        w[i] = acc
    return out


def weighted_sum(const double[:, ::1] maps, const double[::1] weights):
    """``sum_i weights[i] * maps[i]`` over flattened maps of shape (S, N)."""
    cdef Py_ssize_t s_count = maps.shape[0], n = maps.shape[1], i, j
    cdef double wi
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] acc = out
    for i in range(s_count):
        wi = weights[i]
        for j in range(n):
            acc[j] += wi * maps[i, j]
    return out


def confusion_counts(const cnp.uint8_t[::1] pred, const cnp.uint8_t[::1] gt):
    """(TP, FP, FN, TN) for two flattened {0,1} maps."""
    cdef Py_ssize_t n = pred.shape[0], j
    cdef long long tp = 0, p_count = 0, g_count = 0
    cdef unsigned char p, g
    for j in range(n):
        p = pred[j] != 0
        g = gt[j] != 0
        tp += p & g
        p_count += p
        g_count += g
    return tp, p_count - tp, g_count - tp, n - p_count - g_count + tp
