"""Editing operations on a trained model: depth defaults, interpolation,
trail rendering, and motion transfer."""

from __future__ import annotations

import numpy as np

from .cameras import Camera
from .render import RenderConfig, render_image


class EditError(ValueError):
    pass


def default_depth(model, cam: Camera, pixel_u, k=4):
    """Mean camera distance of the k stored key-point positions whose
    projections are nearest to the queried pixel.

    Falls back to every in-front position when fewer than k project;
    raises when none do.
    """
    pts = model.keypoint_positions().reshape(-1, model.cfg.d)
    u, front = cam.project(pts)
    usable = front
    if not usable.any():
        raise EditError("no key-point positions project in front of the camera")
    cand_u = u[usable]
    cand_pts = pts[usable]
    order = np.argsort(np.abs(cand_u - float(pixel_u)), kind="stable")
    take = order[: min(k, order.size)]
    return float(cam.distance(cand_pts[take]).mean())


def interpolate_keypoints(config_a, config_b, s):
    """Componentwise linear interpolation between two N x D configurations."""
    a = np.asarray(config_a, dtype=np.float64)
    b = np.asarray(config_b, dtype=np.float64)
    if a.shape != b.shape:
        raise EditError(f"shape mismatch: {a.shape} vs {b.shape}")
    s = float(s)
    return (1.0 - s) * a + s * b


def fit_affine(src, dst):
    """Least-squares affine map src (M,2) -> dst (M,D), M >= 3.

    Returns (A (D,2), b (D,)); raises on collinear source anchors.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[0] < 3 or src.shape[1] != 2:
        raise EditError("need at least 3 source anchors in 2-D")
    if dst.shape[0] != src.shape[0]:
        raise EditError("anchor count mismatch")
    x = np.concatenate([src, np.ones((src.shape[0], 1))], axis=1)
    if np.linalg.matrix_rank(x) < 3:
        raise EditError("degenerate anchors: source points are collinear")
    sol, *_ = np.linalg.lstsq(x, dst, rcond=None)
    return sol[:2].T, sol[2]


def motion_transfer(source_track, anchors_src, anchors_dst):
    """Map a tracked 2-D source trajectory into key-point space.

    anchors_src (M,2) / anchors_dst (M,D) define the affine transform by
    least squares; the returned array is the per-frame mapped track.
    """
    a, b = fit_affine(anchors_src, anchors_dst)
    track = np.asarray(source_track, dtype=np.float64)
    return track @ a.T + b


def keypoint_bbox(model):
    pts = model.keypoint_positions().reshape(-1, model.cfg.d)
    return pts.min(axis=0), pts.max(axis=0)


def extrapolation_warning(model, k_override, frac=0.25):
    """True when an edited configuration leaves the trained bounding box
    by more than frac of the scene diagonal (renders degrade out there)."""
    lo, hi = keypoint_bbox(model)
    slack = frac * model.scene_diagonal()
    k = np.asarray(k_override, dtype=np.float64)
    return bool(np.any(k < lo - slack) or np.any(k > hi + slack))


def trail_keypoints(trail_times, trail_configs, n_frames):
    """Uniform time samples along a timed list of configurations.

    trail_times (M,) strictly increasing; trail_configs (M, N, D); linear
    interpolation between neighbors, endpoints included.
    """
    times = np.asarray(trail_times, dtype=np.float64)
    configs = np.asarray(trail_configs, dtype=np.float64)
    if times.ndim != 1 or times.size != configs.shape[0] or times.size < 2:
        raise EditError("trail needs at least two timed configurations")
    if np.any(np.diff(times) <= 0):
        raise EditError("trail times must be strictly increasing")
    if n_frames < 2:
        raise EditError("need at least two output frames")
    out = []
    for s in np.linspace(times[0], times[-1], n_frames):
        j = int(np.clip(np.searchsorted(times, s, side="right") - 1, 0,
                        times.size - 2))
        f = (s - times[j]) / (times[j + 1] - times[j])
        out.append(interpolate_keypoints(configs[j], configs[j + 1], f))
    return np.stack(out)


def render_trail(model, cam, trail_times, trail_configs, n_frames,
                 base_frame=0, cfg: RenderConfig | None = None, seed=0):
    """Rendered frame sequence along a key-point trail."""
    cfg = cfg or RenderConfig()
    ks = trail_keypoints(trail_times, trail_configs, n_frames)
    return [render_image(model, cam, base_frame, cfg, stage=2, k_override=k,
                         seed=seed) for k in ks]
