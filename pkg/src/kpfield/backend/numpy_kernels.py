"""Pure-NumPy kernel implementations.

Reference backend for the hot inner loops (dense layers, frequency
encoding, softmax, ray compositing helpers).  The compiled backend in
``_ckernels`` implements the same signatures; either one is selected at
import time by :mod:`kpfield.backend`.

All kernels operate on contiguous float64 arrays and allocate their
outputs.  Shapes follow a (batch, feature) convention.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

NAME = "numpy"


def affine_fwd(x, w, b):
    """y = x @ w + b for x (B,K), w (K,N), b (N,)."""
    return x @ w + b


def affine_bwd(x, w, gy):
    """Gradients of affine_fwd: returns (gx, gw, gb)."""
    return gy @ w.T, x.T @ gy, gy.sum(axis=0)


def affine_bwd_x(w, gy):
    """Input gradient only (skippable when x is a constant)."""
    return gy @ w.T


def affine_bwd_wb(x, gy):
    """Weight and bias gradients only."""
    return x.T @ gy, gy.sum(axis=0)


def affine_relu_fwd(x, w, b):
    """relu(x @ w + b); the output doubles as the relu mask."""
    y = x @ w + b
    return np.where(y > 0.0, y, 0.0 * y)


def relu_mask_grad(y, gy):
    """gy gated by y > 0 (y is the fused affine+relu output)."""
    return np.where(y > 0.0, gy, 0.0 * y)


def relu_fwd(x):
    # 0.0 * x (not plain 0) keeps NaN poisoning intact for divergence checks
    return np.where(x > 0.0, x, 0.0 * x)


def relu_bwd(x, gy):
    return np.where(x > 0.0, gy, 0.0 * x)


def sigmoid_fwd(x):
    return expit(x)


def sigmoid_bwd(y, gy):
    return gy * y * (1.0 - y)


def softplus_fwd(x):
    return np.logaddexp(0.0, x)


def softplus_bwd(x, gy):
    return gy * expit(x)


def posenc_fwd(x, nbands, include_identity, band_w):
    """Frequency encoding of x (B,D).

    Layout: [x?, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x),
    cos(2^(L-1) pi x)], every block (B,D).  band_w (L,) scales both the
    sin and cos block of each band (coarse-to-fine annealing weight).
    """
    b, d = x.shape
    parts = []
    if include_identity:
        parts.append(x)
    for j in range(nbands):
        ang = (np.pi * 2.0**j) * x
        wj = band_w[j]
        parts.append(wj * np.sin(ang))
        parts.append(wj * np.cos(ang))
    if not parts:
        return np.zeros((b, 0))
    return np.concatenate(parts, axis=1)


def posenc_bwd(x, nbands, include_identity, band_w, gy):
    b, d = x.shape
    gx = np.zeros_like(x)
    off = 0
    if include_identity:
        gx += gy[:, :d]
        off = d
    for j in range(nbands):
        f = np.pi * 2.0**j
        ang = f * x
        wj = band_w[j]
        gs = gy[:, off : off + d]
        gc = gy[:, off + d : off + 2 * d]
        gx += (wj * f) * (gs * np.cos(ang) - gc * np.sin(ang))
        off += 2 * d
    return gx


def softmax_fwd(x):
    """Row softmax, shift-invariant."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def cumsum_excl_fwd(x):
    """y[:, j] = sum_{l < j} x[:, l] along axis 1."""
    y = np.cumsum(x, axis=1)
    y = np.roll(y, 1, axis=1)
    y[:, 0] = 0.0
    return y


def cumsum_excl_bwd(gy):
    """dL/dx[:, j] = sum_{l > j} gy[:, l]."""
    g = np.cumsum(gy[:, ::-1], axis=1)[:, ::-1]
    return np.ascontiguousarray(g - gy)


def kpmix_fwd(w, k):
    """y[b, d] = sum_n w[b, n] * k[b, n, d]."""
    return np.einsum("bn,bnd->bd", w, k, optimize=True)


def kpmix_bwd(w, k, gy):
    gw = np.einsum("bd,bnd->bn", gy, k, optimize=True)
    gk = w[:, :, None] * gy[:, None, :]
    return gw, gk
