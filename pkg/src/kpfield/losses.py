"""Training losses: reconstruction, motion, geometry, warp regularization.

The key-point losses evaluate a batch of (frame, track) pairs in one
vectorized graph; pairs whose projections fall behind a camera, outside
the image, or on effectively empty pixels contribute exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class LossWeights:
    motion: float = 1e-4
    geo: float = 0.5
    reg: float = 0.1
    # extra priors; not part of the core objective but required for sharp,
    # frame-consistent depth maps on single-dolly flatland captures
    distortion: float = 3e-3
    ambient: float = 1e-3

    def __post_init__(self):
        if min(self.motion, self.geo, self.reg, self.distortion,
               self.ambient) < 0:
            raise ValueError("loss weights must be nonnegative")


def _cam_arrays(cams, t_idx):
    o = np.stack([cams[t].o for t in t_idx])
    fwd = np.stack([cams[t].forward for t in t_idx])
    lat = np.stack([cams[t].lateral for t in t_idx])
    f = np.array([cams[t].f for t in t_idx])
    c = np.array([cams[t].c for t in t_idx])
    return o, fwd, lat, f, c


def _project_batch(k, cams, t_idx):
    """Tape projection of k (M,2) through each row's frame camera."""
    o, fwd, lat, f, c = _cam_arrays(cams, t_idx)
    rel = ad.sub(k, ad.const(o))
    z = ad.vsum(ad.mul(rel, ad.const(fwd)), axis=1)
    x = ad.vsum(ad.mul(rel, ad.const(lat)), axis=1)
    u = ad.add(ad.mul(ad.div(x, z), ad.const(f)), ad.const(c))
    return u, z


def _distance_batch(k, cams, t_idx):
    o = np.stack([cams[t].o for t in t_idx])
    rel = ad.sub(k, ad.const(o))
    return ad.sqrt(ad.sqnorm(rel, axis=1))


def _pair_validity(kp, cams, width, t_idx, i_idx):
    """Numpy-side in-front and in-image mask for (t, i) pairs."""
    pts = kp[t_idx, i_idx]
    o, fwd, lat, f, c = _cam_arrays(cams, t_idx)
    rel = pts - o
    z = (rel * fwd).sum(axis=1)
    x = (rel * lat).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = f * (x / z) + c
    return (z > 0) & (u >= 0.0) & (u <= width - 1.0), u


def loss_motion(model, dataset, t_idx, i_idx, tape=None):
    """Sum of Eq-style flow-consistency terms over (t, i) pairs.

    Each term is |proj_{t+1}(k_{t+1}) - proj_t(k_t) - flow_t(proj_t(k_t))|^2
    with the flow linearly interpolated at the projected pixel; pairs with
    either endpoint unprojectable are skipped (zero contribution).
    """
    t_idx = np.asarray(t_idx, dtype=np.int64)
    i_idx = np.asarray(i_idx, dtype=np.int64)
    kp = model.keypoint_positions()
    n = model.cfg.n_keypoints
    ok0, _ = _pair_validity(kp, dataset.cams, dataset.width, t_idx, i_idx)
    ok1, _ = _pair_validity(kp, dataset.cams, dataset.width, t_idx + 1, i_idx)
    keep = ok0 & ok1
    if not keep.any():
        return ad.const(np.zeros(())), 0
    t_idx, i_idx = t_idx[keep], i_idx[keep]

    table = tape.param(model.store, "keypoints") if tape else ad.const(
        model.store.get("keypoints"))
    k0 = ad.gather(table, t_idx * n + i_idx)
    k1 = ad.gather(table, (t_idx + 1) * n + i_idx)
    u0, _ = _project_batch(k0, dataset.cams, t_idx)
    u1, _ = _project_batch(k1, dataset.cams, t_idx + 1)
    flow_rows = np.stack([dataset.flow_fw(t) for t in t_idx])
    fl = ad.interp1d(flow_rows, u0)
    resid = ad.sub(ad.sub(u1, u0), fl)
    return ad.sqnorm(resid), int(keep.sum())


def loss_geo(model, dataset, depth_maps, opacity_maps, t_idx, i_idx, tape=None):
    """Sum of depth-consistency terms |dist_t(k) - depth_t(proj_t(k))|^2.

    Pairs projecting onto pixels with accumulated opacity below 0.1 are
    excluded (the rendered depth there is the far-plane placeholder).
    """
    t_idx = np.asarray(t_idx, dtype=np.int64)
    i_idx = np.asarray(i_idx, dtype=np.int64)
    kp = model.keypoint_positions()
    n = model.cfg.n_keypoints
    ok, u = _pair_validity(kp, dataset.cams, dataset.width, t_idx, i_idx)
    grid = np.arange(dataset.width)
    op = np.array([np.interp(u[j], grid, opacity_maps[t_idx[j]])
                   for j in range(len(t_idx))])
    keep = ok & (op >= 0.1)
    if not keep.any():
        return ad.const(np.zeros(())), 0
    t_idx, i_idx = t_idx[keep], i_idx[keep]

    table = tape.param(model.store, "keypoints") if tape else ad.const(
        model.store.get("keypoints"))
    k = ad.gather(table, t_idx * n + i_idx)
    u_var, _ = _project_batch(k, dataset.cams, t_idx)
    depth_rows = np.stack([depth_maps[t] for t in t_idx])
    d = ad.interp1d(depth_rows, u_var)
    phi = _distance_batch(k, dataset.cams, t_idx)
    return ad.sqnorm(ad.sub(phi, d)), int(keep.sum())


def loss_rec(pred_rgb, target):
    """Mean squared error between a rendered batch and its pixels."""
    diff = ad.sub(pred_rgb, ad.const(np.asarray(target, dtype=np.float64)))
    return ad.mean(ad.mul(diff, diff))


def loss_reg(model, pts, t_idx, tape=None, warp_window=None):
    """Mean squared warp residual over surface points pts (B, D)."""
    beta = model._gather_latent(tape, "beta", t_idx)
    x = ad.const(np.asarray(pts, dtype=np.float64))
    xp = model.warp(x, beta, tape, window=warp_window)
    return ad.mean(ad.sqnorm(ad.sub(x, xp), axis=1))
