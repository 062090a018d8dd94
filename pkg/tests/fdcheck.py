"""Central finite-difference oracle used by the gradient tests.

Kept deliberately independent of the tape: it only calls a scalar loss
closure and perturbs raw parameter arrays.
"""

import numpy as np


def fd_grad(f, arr, h=1e-4):
    """Central-difference gradient of scalar f() w.r.t. arr, in place."""
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def fd_check_store(loss_fn, store, names=None, h=1e-4, floor=1e-6):
    """Compare store grads (already computed) against finite differences.

    loss_fn() must re-evaluate the scalar loss from current store values.
    Returns the max relative error over the checked blocks.
    """
    worst = 0.0
    for name in names or store.names():
        blk = store[name]
        fd = fd_grad(loss_fn, blk.data, h=h)
        worst = max(worst, max_rel_err(blk.grad, fd, floor=floor))
    return worst
