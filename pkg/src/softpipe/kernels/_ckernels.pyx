# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused kernels: single-pass row reductions for the hot loops.

Mirrors the signatures in ``_pykernels``; the dispatcher in
``softpipe.kernels`` picks whichever backend is importable.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

ctypedef fused floating:
    float
    double


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1]
    out_np = np.empty((n, v), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(v):
            out[i, j] = <floating> exp(x[i, j] - m)
            s += out[i, j]
        for j in range(v):
            out[i, j] = <floating> (out[i, j] / s)
    return out_np


def softmax_bwd(floating[:, ::1] y, floating[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], v = y.shape[1]
    out_np = np.empty((n, v), dtype=np.asarray(y).dtype)
    cdef floating[:, ::1] dx = out_np
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(v):
            dot += y[i, j] * dy[i, j]
        for j in range(v):
            dx[i, j] = <floating> (y[i, j] * (dy[i, j] - dot))
    return out_np


def log_softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1]
    out_np = np.empty((n, v), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(v):
            s += exp(x[i, j] - m)
        s = log(s)
        for j in range(v):
            out[i, j] = <floating> (x[i, j] - m - s)
    return out_np


def log_softmax_bwd(floating[:, ::1] y, floating[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], v = y.shape[1]
    out_np = np.empty((n, v), dtype=np.asarray(y).dtype)
    cdef floating[:, ::1] dx = out_np
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(v):
            s += dy[i, j]
        for j in range(v):
            dx[i, j] = <floating> (dy[i, j] - exp(y[i, j]) * s)
    return out_np


def layer_norm_fwd(floating[:, ::1] x, floating[::1] gain, floating[::1] bias,
                   double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    dtype = np.asarray(x).dtype
    y_np = np.empty((n, d), dtype=dtype)
    mean_np = np.empty(n, dtype=dtype)
    rstd_np = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] y = y_np
    cdef floating[::1] mean = mean_np
    cdef floating[::1] rstd = rstd_np
    cdef Py_ssize_t i, j
    cdef double m, var, r, diff
    for i in range(n):
        m = 0.0
        for j in range(d):
            m += x[i, j]
        m /= d
        var = 0.0
        for j in range(d):
            diff = x[i, j] - m
            var += diff * diff
        var /= d
        r = 1.0 / sqrt(var + eps)
        mean[i] = <floating> m
        rstd[i] = <floating> r
        for j in range(d):
            y[i, j] = <floating> ((x[i, j] - m) * r * gain[j] + bias[j])
    return y_np, mean_np, rstd_np


def layer_norm_bwd(floating[:, ::1] x, floating[::1] gain, floating[::1] mean,
                   floating[::1] rstd, floating[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    dtype = np.asarray(x).dtype
    dx_np = np.empty((n, d), dtype=dtype)
    dgain_np = np.zeros(d, dtype=dtype)
    dbias_np = np.zeros(d, dtype=dtype)
    cdef floating[:, ::1] dx = dx_np
    cdef floating[::1] dgain = dgain_np
    cdef floating[::1] dbias = dbias_np
    cdef Py_ssize_t i, j
    cdef double m1, m2, xhat, dxhat
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            dxhat = dy[i, j] * gain[j]
            m1 += dxhat
            m2 += dxhat * xhat
            dgain[j] += <floating> (dy[i, j] * xhat)
            dbias[j] += dy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            dxhat = dy[i, j] * gain[j]
            dx[i, j] = <floating> ((dxhat - m1 - xhat * m2) * rstd[i])
    return dx_np, dgain_np, dbias_np


def nll_fwd(floating[:, ::1] logp, cnp.int64_t[::1] targets,
            cnp.uint8_t[::1] mask):
    cdef Py_ssize_t t = logp.shape[0]
    cdef Py_ssize_t i, n = 0
    cdef double acc = 0.0
    for i in range(t):
        if mask[i]:
            acc -= logp[i, targets[i]]
            n += 1
    return np.asarray(logp).dtype.type(acc / n), n


def nll_bwd(logp_shape, dtype, cnp.int64_t[::1] targets,
            cnp.uint8_t[::1] mask, Py_ssize_t n, double gscalar):
    out_np = np.zeros(logp_shape, dtype=dtype)
    _nll_scatter(out_np, targets, mask, n, gscalar)
    return out_np


def _nll_scatter(floating[:, ::1] out, cnp.int64_t[::1] targets,
                 cnp.uint8_t[::1] mask, Py_ssize_t n, double gscalar):
    cdef Py_ssize_t t = out.shape[0]
    cdef Py_ssize_t i
    cdef double val = -gscalar / n
    for i in range(t):
        if mask[i]:
            out[i, targets[i]] = <floating> val
