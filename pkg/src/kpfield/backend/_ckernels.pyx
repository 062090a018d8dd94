# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel implementations (Cython + BLAS).

Same contracts as kpfield.backend.numpy_kernels; dense layers go through
dgemm, everything else is a fused C loop.  float64, C-contiguous only.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, exp, log1p, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

NAME = "cython"


cdef inline void _gemm_rowmajor(char ta, char tb, int m, int n, int k,
                                double* a, int lda, double* b, int ldb,
                                double* c, int ldc, double beta) noexcept nogil:
    # Row-major C = op(A) @ op(B) via the column-major identity C^T = op(B)^T op(A)^T.
    cdef double one = 1.0
    cdef int mm = m, nn = n, kk = k, la = lda, lb = ldb, lc = ldc
    dgemm(&tb, &ta, &nn, &mm, &kk, &one, b, &lb, a, &la, &beta, c, &lc)


def affine_fwd(cnp.ndarray[double, ndim=2, mode="c"] x,
               cnp.ndarray[double, ndim=2, mode="c"] w,
               cnp.ndarray[double, ndim=1, mode="c"] b):
    cdef int bb = x.shape[0], kk = x.shape[1], nn = w.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] y = np.empty((bb, nn))
    cdef int i, j
    if bb and kk and nn:
        _gemm_rowmajor(b'N', b'N', bb, nn, kk,
                       &x[0, 0], kk, &w[0, 0], nn, &y[0, 0], nn, 0.0)
    elif bb and nn:
        y[:, :] = 0.0
    for i in range(bb):
        for j in range(nn):
            y[i, j] += b[j]
    return y


def affine_bwd_x(cnp.ndarray[double, ndim=2, mode="c"] w,
                 cnp.ndarray[double, ndim=2, mode="c"] gy):
    cdef int bb = gy.shape[0], kk = w.shape[0], nn = w.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] gx = np.empty((bb, kk))
    if bb and kk and nn:
        _gemm_rowmajor(b'N', b'T', bb, kk, nn,
                       &gy[0, 0], nn, &w[0, 0], nn, &gx[0, 0], kk, 0.0)
    elif bb and kk:
        gx[:, :] = 0.0
    return gx


def affine_bwd_wb(cnp.ndarray[double, ndim=2, mode="c"] x,
                  cnp.ndarray[double, ndim=2, mode="c"] gy):
    cdef int bb = x.shape[0], kk = x.shape[1], nn = gy.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] gw = np.zeros((kk, nn))
    cdef cnp.ndarray[double, ndim=1, mode="c"] gb = np.zeros(nn)
    cdef int i, j
    if bb and kk and nn:
        _gemm_rowmajor(b'T', b'N', kk, nn, bb,
                       &x[0, 0], kk, &gy[0, 0], nn, &gw[0, 0], nn, 0.0)
    for i in range(bb):
        for j in range(nn):
            gb[j] += gy[i, j]
    return gw, gb


def affine_bwd(cnp.ndarray[double, ndim=2, mode="c"] x,
               cnp.ndarray[double, ndim=2, mode="c"] w,
               cnp.ndarray[double, ndim=2, mode="c"] gy):
    gw, gb = affine_bwd_wb(x, gy)
    return affine_bwd_x(w, gy), gw, gb


def affine_relu_fwd(cnp.ndarray[double, ndim=2, mode="c"] x,
                    cnp.ndarray[double, ndim=2, mode="c"] w,
                    cnp.ndarray[double, ndim=1, mode="c"] b):
    """relu(x @ w + b) in one pass; the output doubles as the relu mask."""
    cdef int bb = x.shape[0], kk = x.shape[1], nn = w.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] y = np.empty((bb, nn))
    cdef int i, j
    cdef double v
    if bb and kk and nn:
        _gemm_rowmajor(b'N', b'N', bb, nn, kk,
                       &x[0, 0], kk, &w[0, 0], nn, &y[0, 0], nn, 0.0)
    elif bb and nn:
        y[:, :] = 0.0
    for i in range(bb):
        for j in range(nn):
            v = y[i, j] + b[j]
            y[i, j] = v if v > 0.0 else 0.0 * v
    return y


def relu_mask_grad(cnp.ndarray[double, ndim=2, mode="c"] y,
                   cnp.ndarray[double, ndim=2, mode="c"] gy):
    """gy gated by y > 0 (y is the fused affine+relu output)."""
    cdef cnp.ndarray[double, ndim=2, mode="c"] g = np.empty_like(y)
    cdef Py_ssize_t n = y.size, i
    cdef double* yp = &y[0, 0] if n else NULL
    cdef double* gp = &gy[0, 0] if n else NULL
    cdef double* op = &g[0, 0] if n else NULL
    for i in range(n):
        op[i] = gp[i] if yp[i] > 0.0 else 0.0 * yp[i]
    return g


def relu_fwd(cnp.ndarray[double, ndim=2, mode="c"] x):
    cdef cnp.ndarray[double, ndim=2, mode="c"] y = np.empty_like(x)
    cdef Py_ssize_t n = x.size, i
    cdef double* xp = &x[0, 0] if n else NULL
    cdef double* yp = &y[0, 0] if n else NULL
    for i in range(n):
        # 0.0 * x keeps NaN poisoning intact for divergence detection
        yp[i] = xp[i] if xp[i] > 0.0 else 0.0 * xp[i]
    return y


def relu_bwd(cnp.ndarray[double, ndim=2, mode="c"] x,
             cnp.ndarray[double, ndim=2, mode="c"] gy):
    cdef cnp.ndarray[double, ndim=2, mode="c"] gx = np.empty_like(x)
    cdef Py_ssize_t n = x.size, i
    cdef double* xp = &x[0, 0] if n else NULL
    cdef double* gp = &gy[0, 0] if n else NULL
    cdef double* op = &gx[0, 0] if n else NULL
    for i in range(n):
        op[i] = gp[i] if xp[i] > 0.0 else 0.0 * xp[i]
    return gx


cdef inline double _sigmoid(double v) noexcept nogil:
    if v >= 0.0:
        return 1.0 / (1.0 + exp(-v))
    cdef double e = exp(v)
    return e / (1.0 + e)


def sigmoid_fwd(cnp.ndarray[double, ndim=2, mode="c"] x):
    cdef cnp.ndarray[double, ndim=2, mode="c"] y = np.empty_like(x)
    cdef Py_ssize_t n = x.size, i
    cdef double* xp = &x[0, 0] if n else NULL
    cdef double* yp = &y[0, 0] if n else NULL
    for i in range(n):
        yp[i] = _sigmoid(xp[i])
    return y


def sigmoid_bwd(cnp.ndarray[double, ndim=2, mode="c"] y,
                cnp.ndarray[double, ndim=2, mode="c"] gy):
    cdef cnp.ndarray[double, ndim=2, mode="c"] gx = np.empty_like(y)
    cdef Py_ssize_t n = y.size, i
    cdef double* yp = &y[0, 0] if n else NULL
    cdef double* gp = &gy[0, 0] if n else NULL
    cdef double* op = &gx[0, 0] if n else NULL
    for i in range(n):
        op[i] = gp[i] * yp[i] * (1.0 - yp[i])
    return gx


def softplus_fwd(cnp.ndarray[double, ndim=2, mode="c"] x):
    cdef cnp.ndarray[double, ndim=2, mode="c"] y = np.empty_like(x)
    cdef Py_ssize_t n = x.size, i
    cdef double* xp = &x[0, 0] if n else NULL
    cdef double* yp = &y[0, 0] if n else NULL
    cdef double v
    for i in range(n):
        v = xp[i]
        # log(1 + e^v), overflow-safe
        yp[i] = v + log1p(exp(-v)) if v > 0.0 else log1p(exp(v))
    return y


def softplus_bwd(cnp.ndarray[double, ndim=2, mode="c"] x,
                 cnp.ndarray[double, ndim=2, mode="c"] gy):
    cdef cnp.ndarray[double, ndim=2, mode="c"] gx = np.empty_like(x)
    cdef Py_ssize_t n = x.size, i
    cdef double* xp = &x[0, 0] if n else NULL
    cdef double* gp = &gy[0, 0] if n else NULL
    cdef double* op = &gx[0, 0] if n else NULL
    for i in range(n):
        op[i] = gp[i] * _sigmoid(xp[i])
    return gx


def posenc_fwd(cnp.ndarray[double, ndim=2, mode="c"] x,
               int nbands, bint include_identity,
               cnp.ndarray[double, ndim=1, mode="c"] band_w):
    cdef int b = x.shape[0], d = x.shape[1]
    cdef int out_dim = (d if include_identity else 0) + 2 * nbands * d
    cdef cnp.ndarray[double, ndim=2, mode="c"] y = np.empty((b, out_dim))
    cdef int i, j, c, off
    cdef double f, wj, ang, pi = 3.141592653589793
    for i in range(b):
        off = 0
        if include_identity:
            for c in range(d):
                y[i, c] = x[i, c]
            off = d
        for j in range(nbands):
            f = pi * (<double> (1 << j))
            wj = band_w[j]
            for c in range(d):
                ang = f * x[i, c]
                y[i, off + c] = wj * sin(ang)
                y[i, off + d + c] = wj * cos(ang)
            off += 2 * d
    return y


def posenc_bwd(cnp.ndarray[double, ndim=2, mode="c"] x,
               int nbands, bint include_identity,
               cnp.ndarray[double, ndim=1, mode="c"] band_w,
               cnp.ndarray[double, ndim=2, mode="c"] gy):
    cdef int b = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] gx = np.zeros((b, d))
    cdef int i, j, c, off
    cdef double f, wj, ang, pi = 3.141592653589793
    for i in range(b):
        off = 0
        if include_identity:
            for c in range(d):
                gx[i, c] += gy[i, c]
            off = d
        for j in range(nbands):
            f = pi * (<double> (1 << j))
            wj = band_w[j] * f
            for c in range(d):
                ang = pi * (<double> (1 << j)) * x[i, c]
                gx[i, c] += wj * (gy[i, off + c] * cos(ang) - gy[i, off + d + c] * sin(ang))
            off += 2 * d
    return gx


def softmax_fwd(cnp.ndarray[double, ndim=2, mode="c"] x):
    cdef int b = x.shape[0], n = x.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] y = np.empty_like(x)
    cdef int i, j
    cdef double m, s
    for i in range(b):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n):
            y[i, j] = exp(x[i, j] - m)
            s += y[i, j]
        for j in range(n):
            y[i, j] /= s
    return y


def softmax_bwd(cnp.ndarray[double, ndim=2, mode="c"] y,
                cnp.ndarray[double, ndim=2, mode="c"] gy):
    cdef int b = y.shape[0], n = y.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] gx = np.empty_like(y)
    cdef int i, j
    cdef double dot
    for i in range(b):
        dot = 0.0
        for j in range(n):
            dot += gy[i, j] * y[i, j]
        for j in range(n):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return gx


def cumsum_excl_fwd(cnp.ndarray[double, ndim=2, mode="c"] x):
    cdef int r = x.shape[0], s = x.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] y = np.empty_like(x)
    cdef int i, j
    cdef double acc
    for i in range(r):
        acc = 0.0
        for j in range(s):
            y[i, j] = acc
            acc += x[i, j]
    return y


def cumsum_excl_bwd(cnp.ndarray[double, ndim=2, mode="c"] gy):
    cdef int r = gy.shape[0], s = gy.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] gx = np.empty_like(gy)
    cdef int i, j
    cdef double acc
    for i in range(r):
        acc = 0.0
        for j in range(s - 1, -1, -1):
            gx[i, j] = acc
            acc += gy[i, j]
    return gx


def kpmix_fwd(cnp.ndarray[double, ndim=2, mode="c"] w,
              cnp.ndarray[double, ndim=3, mode="c"] k):
    cdef int b = w.shape[0], n = w.shape[1], d = k.shape[2]
    cdef cnp.ndarray[double, ndim=2, mode="c"] y = np.zeros((b, d))
    cdef int i, j, c
    cdef double wj
    for i in range(b):
        for j in range(n):
            wj = w[i, j]
            for c in range(d):
                y[i, c] += wj * k[i, j, c]
    return y


def kpmix_bwd(cnp.ndarray[double, ndim=2, mode="c"] w,
              cnp.ndarray[double, ndim=3, mode="c"] k,
              cnp.ndarray[double, ndim=2, mode="c"] gy):
    cdef int b = w.shape[0], n = w.shape[1], d = k.shape[2]
    cdef cnp.ndarray[double, ndim=2, mode="c"] gw = np.zeros((b, n))
    cdef cnp.ndarray[double, ndim=3, mode="c"] gk = np.empty_like(k)
    cdef int i, j, c
    cdef double acc, wj
    for i in range(b):
        for j in range(n):
            acc = 0.0
            wj = w[i, j]
            for c in range(d):
                acc += gy[i, c] * k[i, j, c]
                gk[i, j, c] = wj * gy[i, c]
            gw[i, j] = acc
    return gw, gk
