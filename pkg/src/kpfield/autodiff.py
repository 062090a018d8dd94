"""Reverse-mode automatic differentiation over float64 arrays.

A Tape records primitive array operations while model code runs; the
backward pass walks the recorded nodes in reverse order exactly once and
accumulates gradients into ParamStore blocks.  Ops compute eagerly and
record nothing when no tape is active, so rendering for evaluation pays
no graph cost.

Broadcasting is deliberately absent: elementwise ops require matching
shapes, everything batch-structured goes through dedicated primitives
(affine, kpmix, gather, ...).
"""

from __future__ import annotations

import numpy as np

from .backend import kernels as K


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


_ACTIVE = None


def _as_f64(x):
    a = np.asarray(x, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    return a if a.ndim == 0 else np.ascontiguousarray(a)


class Var:
    """Array value, optionally connected to the active tape."""

    __slots__ = ("data", "idx")

    def __init__(self, data, idx=None):
        self.data = data
        self.idx = idx

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.data.shape}, recorded={self.idx is not None})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(const(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("name", "parents", "bwd")

    def __init__(self, name, parents, bwd):
        self.name = name
        self.parents = parents
        self.bwd = bwd


class Tape:
    """Recorded computation; usable as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._param_leaves = {}  # (id(store), name) -> (idx, store, name)
        self._stores = {}

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise GraphError("a tape is already active")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False

    def _append(self, name, parents, bwd):
        self.nodes.append(_Node(name, parents, bwd))
        return len(self.nodes) - 1

    def input(self, value):
        """Differentiable leaf not tied to a ParamStore (for tests/probes)."""
        data = _as_f64(value)
        idx = self._append("input", (), None)
        return Var(data, idx)

    def param(self, store, name):
        """Leaf bound to a parameter block; one node per block per tape."""
        key = (id(store), name)
        hit = self._param_leaves.get(key)
        if hit is not None:
            return Var(store[name].data, hit)
        idx = self._append("param", (), None)
        self._param_leaves[key] = idx
        self._stores[id(store)] = store
        return Var(store[name].data, idx)

    def backward(self, loss):
        """Accumulate d(loss)/d(block) into every reachable store block.

        Unreachable blocks are left at zero (grads are cleared first).
        Returns a list of per-node gradients for probe access.
        """
        if loss.idx is None:
            raise GraphError("loss was not recorded on this tape")
        if loss.data.shape != ():
            raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
        grads = _GradSlots(len(self.nodes))
        grads[loss.idx] = np.ones(())
        for i in range(len(self.nodes) - 1, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.bwd is not None:
                node.bwd(g, grads)
        for store in self._stores.values():
            store.zero_grads()
        for (sid, name), idx in self._param_leaves.items():
            if grads[idx] is not None:
                self._stores[sid][name].grad += grads[idx]
        self._grads = grads
        return grads

    def grad(self, var):
        """Gradient of the last backward() w.r.t. a recorded var."""
        if var.idx is None:
            raise GraphError("var was not recorded")
        g = self._grads[var.idx]
        if g is None:
            return np.zeros_like(var.data)
        return np.asarray(g, dtype=np.float64)


def active_tape():
    return _ACTIVE


def const(value):
    return Var(_as_f64(value))


class _GradSlots:
    """Per-node gradient accumulators with copy-on-second-write.

    The first contribution is stored by reference (it may alias a
    downstream gradient buffer, which is final by the time it arrives);
    only a second contribution forces a private copy.
    """

    __slots__ = ("vals", "owned")

    def __init__(self, n):
        self.vals = [None] * n
        self.owned = [False] * n

    def add(self, idx, val):
        cur = self.vals[idx]
        if cur is None:
            self.vals[idx] = val
        elif self.owned[idx]:
            cur += val
        else:
            self.vals[idx] = cur + val
            self.owned[idx] = True

    def __getitem__(self, idx):
        return self.vals[idx]

    def __setitem__(self, idx, val):
        self.vals[idx] = val
        self.owned[idx] = True

    def __len__(self):
        return len(self.vals)


def _record(name, out_data, parents, vjps):
    """parents: list of Vars; vjps: per-parent fn(gout) -> grad or None."""
    tape = _ACTIVE
    live = tape is not None and any(p.idx is not None for p in parents)
    if not live:
        return Var(out_data)
    pidx = tuple(p.idx for p in parents)

    def bwd(gout, grads):
        for i, idx in enumerate(pidx):
            if idx is None or vjps[i] is None:
                continue
            grads.add(idx, vjps[i](gout))

    return Var(out_data, tape._append(name, pidx, bwd))


def _wrap(x):
    return x if isinstance(x, Var) else const(x)


def _check_same_shape(opname, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same_shape("add", a, b)
    return _record("add", a.data + b.data, [a, b], [lambda g: g, lambda g: g])


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same_shape("sub", a, b)
    return _record("sub", a.data - b.data, [a, b], [lambda g: g, lambda g: -g])


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same_shape("mul", a, b)
    return _record("mul", a.data * b.data, [a, b],
                   [lambda g: g * b.data, lambda g: g * a.data])


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same_shape("div", a, b)
    out = a.data / b.data
    return _record("div", out, [a, b],
                   [lambda g: g / b.data, lambda g: -g * out / b.data])


def scale(a, c):
    c = float(c)
    return _record("scale", a.data * c, [a], [lambda g: g * c])


def neg(a):
    return scale(a, -1.0)


def exp(a):
    out = np.exp(a.data)
    return _record("exp", out, [a], [lambda g: g * out])


def sqrt(a):
    out = np.sqrt(a.data)
    return _record("sqrt", out, [a], [lambda g: g * (0.5 / out)])


def sin(a):
    return _record("sin", np.sin(a.data), [a], [lambda g: g * np.cos(a.data)])


def cos(a):
    return _record("cos", np.cos(a.data), [a], [lambda g: -g * np.sin(a.data)])


def _elemwise_2d(fn_fwd, fn_bwd, name, a, save_out):
    x = a.data
    flat = x.reshape(1, -1) if x.ndim != 2 else x
    y = fn_fwd(np.ascontiguousarray(flat))
    out = y.reshape(x.shape)
    saved = out.reshape(flat.shape) if save_out else flat

    def vjp(g):
        gf = np.ascontiguousarray(g.reshape(flat.shape))
        return fn_bwd(np.ascontiguousarray(saved), gf).reshape(x.shape)

    return _record(name, out, [a], [vjp])


def relu(a):
    return _elemwise_2d(K.relu_fwd, K.relu_bwd, "relu", a, save_out=False)


def sigmoid(a):
    return _elemwise_2d(K.sigmoid_fwd, K.sigmoid_bwd, "sigmoid", a, save_out=True)


def softplus(a):
    return _elemwise_2d(K.softplus_fwd, K.softplus_bwd, "softplus", a, save_out=False)


# ------------------------------------------------------------------- linear

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    return _record("matmul", a.data @ b.data, [a, b],
                   [lambda g: g @ b.data.T, lambda g: a.data.T @ g])


def affine(x, w, b):
    """x @ w + b with fused kernels; x (B,K), w (K,N), b (N,).

    The input gradient dgemm is skipped entirely when x is a constant
    (first layers fed by encodings), likewise the weight gradients.
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("affine: expected x (B,K), w (K,N), b (N,)")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"affine: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}")
    out = K.affine_fwd(x.data, w.data, b.data)
    cache = {}

    def _wb(g):
        if "wb" not in cache:
            cache["wb"] = K.affine_bwd_wb(x.data, np.ascontiguousarray(g))
        return cache["wb"]

    return _record("affine", out, [x, w, b],
                   [lambda g: K.affine_bwd_x(w.data, np.ascontiguousarray(g)),
                    lambda g: _wb(g)[0], lambda g: _wb(g)[1]])


# ---------------------------------------------------------------- reductions

def affine_relu(x, w, b):
    """Fused relu(x @ w + b); one memory pass forward and backward."""
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"affine_relu: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}")
    out = K.affine_relu_fwd(x.data, w.data, b.data)
    cache = {}

    def _gpre(g):
        if "g" not in cache:
            cache["g"] = K.relu_mask_grad(out, np.ascontiguousarray(g))
        return cache["g"]

    def _wb(g):
        if "wb" not in cache:
            cache["wb"] = K.affine_bwd_wb(x.data, _gpre(g))
        return cache["wb"]

    return _record("affine_relu", out, [x, w, b],
                   [lambda g: K.affine_bwd_x(w.data, _gpre(g)),
                    lambda g: _wb(g)[0], lambda g: _wb(g)[1]])


def vsum(a, axis=None):
    out = a.data.sum(axis=axis)
    if axis is None:
        return _record("sum", np.asarray(out), [a],
                       [lambda g: np.broadcast_to(g, a.data.shape).copy()])
    n = a.data.shape[axis]

    def vjp(g):
        return np.repeat(np.expand_dims(g, axis), n, axis=axis)

    return _record("sum", out, [a], [vjp])


def mean(a):
    n = a.data.size
    out = np.asarray(a.data.mean())
    return _record("mean", out, [a],
                   [lambda g: np.broadcast_to(g / n, a.data.shape).copy()])


def sqnorm(a, axis=None):
    """Sum of squares over all elements (scalar) or per row (axis=1)."""
    if axis is None:
        out = np.asarray((a.data * a.data).sum())
        return _record("sqnorm", out, [a], [lambda g: (2.0 * g) * a.data])
    if axis != 1 or a.data.ndim != 2:
        raise ShapeError("sqnorm: axis must be None or 1 on a 2-D array")
    out = (a.data * a.data).sum(axis=1)
    return _record("sqnorm", out, [a], [lambda g: 2.0 * a.data * g[:, None]])


def softmax(a):
    if a.data.ndim != 2:
        raise ShapeError("softmax expects a 2-D array")
    y = K.softmax_fwd(np.ascontiguousarray(a.data))
    return _record("softmax", y, [a],
                   [lambda g: K.softmax_bwd(y, np.ascontiguousarray(g))])


# ---------------------------------------------------------------- structure

def concat(parts, axis=1):
    parts = [_wrap(p) for p in parts]
    nd = parts[0].data.ndim
    if any(p.data.ndim != nd for p in parts):
        raise ShapeError("concat: rank mismatch")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)
    vjps = []
    for i in range(len(parts)):
        lo, hi = offs[i], offs[i + 1]
        sl = [slice(None)] * nd
        sl[axis] = slice(lo, hi)
        vjps.append(lambda g, sl=tuple(sl): np.ascontiguousarray(g[sl]))
    return _record("concat", out, parts, vjps)


def slice_cols(a, j0, j1):
    if a.data.ndim != 2:
        raise ShapeError("slice_cols expects a 2-D array")
    out = np.ascontiguousarray(a.data[:, j0:j1])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        return full

    return _record("slice_cols", out, [a], [vjp])


def reshape(a, shape):
    out = a.data.reshape(shape)

    def vjp(g):
        return np.ascontiguousarray(g).reshape(a.data.shape)

    return _record("reshape", out, [a], [vjp])


def gather(table, idx):
    """Row lookup table[idx]; backward scatter-adds."""
    if table.data.ndim != 2:
        raise ShapeError("gather expects a 2-D table")
    idx = np.asarray(idx, dtype=np.int64)
    out = np.ascontiguousarray(table.data[idx])

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return full

    return _record("gather", out, [table], [vjp])


def kpmix(w, k):
    """Batched convex combination: out[b] = sum_n w[b,n] * k[b,n,:]."""
    if w.data.ndim != 2 or k.data.ndim != 3 or w.data.shape != k.data.shape[:2]:
        raise ShapeError(f"kpmix: w {w.data.shape}, k {k.data.shape}")
    out = K.kpmix_fwd(np.ascontiguousarray(w.data), np.ascontiguousarray(k.data))
    cache = {}

    def _bwd(g):
        if "r" not in cache:
            cache["r"] = K.kpmix_bwd(w.data, k.data, np.ascontiguousarray(g))
        return cache["r"]

    return _record("kpmix", out, [w, k],
                   [lambda g: _bwd(g)[0], lambda g: _bwd(g)[1]])


def cumsum_exclusive(a):
    """Along axis 1: out[:, j] = sum_{l<j} a[:, l]."""
    if a.data.ndim != 2:
        raise ShapeError("cumsum_exclusive expects a 2-D array")
    out = K.cumsum_excl_fwd(np.ascontiguousarray(a.data))
    return _record("cumsum_excl", out, [a],
                   [lambda g: K.cumsum_excl_bwd(np.ascontiguousarray(g))])


def posenc(a, nbands, include_identity, band_w):
    """Frequency encoding; band_w is the per-band annealing weight."""
    if a.data.ndim != 2:
        raise ShapeError("posenc expects a 2-D array")
    band_w = np.ascontiguousarray(band_w, dtype=np.float64)
    x = np.ascontiguousarray(a.data)
    out = K.posenc_fwd(x, nbands, include_identity, band_w)
    return _record(
        "posenc", out, [a],
        [lambda g: K.posenc_bwd(x, nbands, include_identity, band_w,
                                np.ascontiguousarray(g))])


def shift_scale(a, shift, scale):
    """Row-broadcast normalization: out[b, j] = (a[b, j] - shift[j]) * scale[j]."""
    shift = np.asarray(shift, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    out = (a.data - shift) * scale
    return _record("shift_scale", out, [a], [lambda g: g * scale])


def interp1d(field, u):
    """Linear interpolation of a fixed field at positions u (B,).

    field is (W,) shared across the batch or (B, W) row-per-position.
    Positions are clamped to the support; gradient flows to u only (the
    field is data, not parameters).
    """
    f = np.asarray(field, dtype=np.float64)
    n = f.shape[-1]
    pos = np.clip(u.data, 0.0, n - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, n - 2) if n > 1 else np.zeros_like(i0)
    frac = pos - i0
    if f.ndim == 1:
        lo, hi = f[i0], f[i0 + 1] if n > 1 else f[i0]
    else:
        rows = np.arange(f.shape[0])
        lo = f[rows, i0]
        hi = f[rows, i0 + 1] if n > 1 else lo
    slope = hi - lo if n > 1 else np.zeros_like(pos)
    out = lo + slope * frac
    inside = (u.data > 0.0) & (u.data < n - 1.0)

    def vjp(g):
        return g * slope * inside

    return _record("interp1d", out, [u], [vjp])
