"""Scene analysis: find dynamic centers and initialize key-point tracks.

The ambient coordinates of the trained stage-1 model are recorded on a
canonical-space grid over all frames; cells whose per-frame means vary
the most mark dynamic regions.  Local maxima of the smoothed variance
become reference key points, each gets the earliest frame in which it
lies on a visible surface, and tracks are initialized by stepping the
projected point through the optical flow (with optional long-range
skipping gated by forward/backward round-trip confidence).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .dataset import Dataset
from .render import RenderConfig, render_image

CONF_EPS = 1e-6  # regularizes the reciprocal round-trip confidence


class AnalysisError(RuntimeError):
    pass


@dataclass
class AnalysisConfig:
    grid_res: int = 64
    smooth_sigma: float = 1.5       # cells
    score_floor: float = 0.2        # fraction of the max smoothed variance
    suppress_radius: float = 8.0    # cells, greedy non-maximum suppression
    min_frame_frac: float = 0.25    # cells seen less often are not detectable
    surface_opacity: float = 0.5
    delta_frac: float = 0.01        # reference-frame depth gate, x scene diag
    skip_stride: int = 0            # 0 = ceil(T / 8)
    conf_threshold: float = 0.5
    use_skipping: bool = True
    render_samples: int = 64


@dataclass
class VarianceGrid:
    lo: np.ndarray
    hi: np.ndarray
    res: int
    counts: np.ndarray     # (G, G) frames with at least one sample
    variance: np.ndarray   # (G, G) raw variance of per-frame means
    smoothed: np.ndarray   # (G, G)
    valid: np.ndarray      # (G, G) observed in enough frames
    n_frames: int

    def cell_center(self, ij):
        step = (self.hi - self.lo) / self.res
        return self.lo + (np.asarray(ij)[::-1] + 0.5) * step

    def cell_of(self, pos):
        step = (self.hi - self.lo) / self.res
        ij = np.floor((np.asarray(pos) - self.lo) / step).astype(int)
        return np.clip(ij, 0, self.res - 1)[::-1]


@dataclass
class ReferenceKeyPoint:
    position: np.ndarray   # canonical cell center
    score: float
    cell: tuple
    t_ref: int = -1


@dataclass
class KeyPointTrack:
    t_ref: int
    pixels: np.ndarray       # (T,)
    world: np.ndarray        # (T, 2)
    confidence: np.ndarray   # (T,)
    provenance: list         # per frame: reference | frame-by-frame | skip
    clamped: np.ndarray      # (T,) bool


def build_variance_grid(dataset: Dataset, model, cfg: AnalysisConfig,
                        bounds=None):
    """Record per-frame mean ambient coordinates per canonical cell.

    Surface points come from tracing all pixel rays per frame (opacity
    above the surface threshold); each point's ambient coordinates are
    binned at its warped (canonical) location.  The raw statistic is the
    population variance across the per-frame cell means, summed over
    ambient components, then Gaussian-smoothed.  Cells observed in less
    than min_frame_frac of frames are excluded from detection but still
    contribute to the smoothing.
    """
    g = cfg.grid_res
    lo = np.asarray(bounds[0] if bounds else model.cfg.bounds_lo, dtype=np.float64)
    hi = np.asarray(bounds[1] if bounds else model.cfg.bounds_hi, dtype=np.float64)
    a_dim = model.cfg.ambient_dim
    n_cells = g * g
    obs = np.zeros(n_cells)
    s1 = np.zeros((n_cells, a_dim))
    s2 = np.zeros((n_cells, a_dim))
    rcfg = RenderConfig(n_samples=cfg.render_samples,
                        background=tuple(dataset.background))
    step = (hi - lo) / g
    total_points = 0

    for t in range(dataset.frames):
        out = render_image(model, dataset.cams[t], t, rcfg, stage=1, seed=0)
        keep = out.opacity > cfg.surface_opacity
        if not keep.any():
            continue
        cam = dataset.cams[t]
        dirs = cam.pixel_rays()[1][keep]
        # median termination snaps edge pixels onto a real surface instead
        # of a floating blend between foreground and background
        pts = cam.o + out.median_depth[keep, None] * dirs
        total_points += pts.shape[0]
        beta = ad.const(np.repeat(model.store.get("beta")[t][None, :],
                                  pts.shape[0], axis=0))
        xp = model.warp(ad.const(pts), beta).data
        amb = model.ambient_array(pts, t)
        ij = np.floor((xp - lo) / step).astype(int)
        inside = np.all((ij >= 0) & (ij < g), axis=1)
        if not inside.any():
            continue
        flat = ij[inside, 1] * g + ij[inside, 0]
        csum = np.zeros((n_cells, a_dim))
        ccnt = np.zeros(n_cells)
        np.add.at(csum, flat, amb[inside])
        np.add.at(ccnt, flat, 1.0)
        seen = ccnt > 0
        mean = csum[seen] / ccnt[seen, None]
        obs[seen] += 1
        s1[seen] += mean
        s2[seen] += mean * mean

    if total_points == 0:
        raise AnalysisError("no surface points found; is the model trained?")

    var = np.zeros((n_cells, a_dim))
    seen = obs > 0
    m = s1[seen] / obs[seen, None]
    var[seen] = s2[seen] / obs[seen, None] - m * m
    raw = np.maximum(var.sum(axis=1), 0.0).reshape(g, g)
    counts = obs.reshape(g, g)
    smoothed = ndimage.gaussian_filter(raw, sigma=cfg.smooth_sigma)
    valid = counts >= cfg.min_frame_frac * dataset.frames
    return VarianceGrid(lo=lo, hi=hi, res=g, counts=counts, variance=raw,
                        smoothed=smoothed, valid=valid, n_frames=dataset.frames)


def detect_reference_keypoints(grid: VarianceGrid, cfg: AnalysisConfig):
    """Strict local maxima of the smoothed variance, floored and suppressed.

    Candidates must be valid cells and beat all 8 neighbors; survivors
    below score_floor x (max over valid cells) are dropped; greedy
    suppression keeps the best peak within each suppress_radius
    neighborhood, ties resolved by lexicographic cell index.
    """
    g = grid.res
    if not grid.valid.any():
        raise AnalysisError("no valid grid cells; train longer or relax the "
                            "observation threshold")
    # invalid cells are excluded from the analysis domain entirely: they are
    # neither candidates nor competitors in the neighborhood comparison
    s = np.where(grid.valid, grid.smoothed, -np.inf)
    footprint = np.ones((3, 3), dtype=bool)
    footprint[1, 1] = False
    neigh_max = ndimage.maximum_filter(s, footprint=footprint, mode="constant",
                                       cval=-np.inf)
    peak = grid.valid & (s > neigh_max)
    top = s[grid.valid].max()
    peak &= s >= cfg.score_floor * top
    idx = np.argwhere(peak)
    if idx.size == 0:
        raise AnalysisError(
            "no variance peaks above the floor; lower score_floor or check "
            "that the scene has dynamic parts")
    order = sorted(range(len(idx)), key=lambda k: (-s[tuple(idx[k])], tuple(idx[k])))
    kept = []
    for k in order:
        ij = idx[k]
        if all(np.linalg.norm(ij - np.asarray(other.cell)) > cfg.suppress_radius
               for other in kept):
            kept.append(ReferenceKeyPoint(position=_refine_center(grid, ij, cfg),
                                          score=float(s[tuple(ij)]),
                                          cell=tuple(ij)))
    return kept


def _refine_center(grid, peak_ij, cfg):
    """Variance-weighted sub-cell centroid around a peak.

    The moving face of a rigid part spreads its variance over the whole
    lateral extent it sweeps (and over its attached shadow bands), so the
    raw peak cell is arbitrary within that structure; the squared-variance
    centroid of the valid suppression neighborhood recenters the reference
    point onto the part.  Training cannot undo a lateral offset later
    (flow and depth are satisfied by any surface point of the part), so
    this is where placement accuracy is decided.
    """
    r = max(1, int(round(cfg.suppress_radius)))
    i0, j0 = int(peak_ij[0]), int(peak_ij[1])
    g = grid.res
    pos = np.zeros(2)
    total = 0.0
    for i in range(max(0, i0 - r), min(g, i0 + r + 1)):
        for j in range(max(0, j0 - r), min(g, j0 + r + 1)):
            if not grid.valid[i, j]:
                continue
            w = float(grid.smoothed[i, j]) ** 2
            pos += w * grid.cell_center((i, j))
            total += w
    if total <= 0:
        return grid.cell_center((i0, j0))
    return pos / total


def select_reference_frame(k_ref, depth_maps, cams, delta, width):
    """Earliest frame where the point projects onto a matching surface.

    Accepts the smallest t with squared depth residual below delta^2 and
    the projection in front of the camera and inside the image; raises
    with the best (frame, residual) when none qualifies.
    """
    grid_u = np.arange(width)
    best = (None, np.inf)
    for t in range(len(cams)):
        u, front = cams[t].project(k_ref)
        if not front or not (0.0 <= u <= width - 1.0):
            continue
        d = np.interp(u, grid_u, depth_maps[t])
        resid2 = float((cams[t].distance(k_ref) - d) ** 2)
        if resid2 < delta * delta:
            return t
        if resid2 < best[1]:
            best = (t, resid2)
    raise AnalysisError(
        f"no reference frame within delta={delta:.4g}; best residual^2 "
        f"{best[1]:.4g} at frame {best[0]}")


def _step_flow(dataset, pos, t, direction):
    """One flow step from frame t to t+direction at pixel position pos."""
    grid = np.arange(dataset.width)
    flow = dataset.flow_fw(t) if direction > 0 else dataset.flow_bw(t)
    return pos + np.interp(pos, grid, flow)


def _fused_step(dataset, pos, t, direction):
    """Forward/backward-fused flow step from frame t to t+direction.

    The reverse flow at the predicted landing point re-estimates the start;
    splitting the round-trip residual halves the step noise (independent
    per-field draws) and reduces to the plain step when the flows are exact
    inverses.
    """
    grid = np.arange(dataset.width)
    t2 = t + direction
    pred = _step_flow(dataset, pos, t, direction)
    back = dataset.flow_bw(t2) if direction > 0 else dataset.flow_fw(t2)
    start_est = pred + np.interp(pred, grid, back)
    return pred - 0.5 * (start_est - pos)


def _clamp(dataset, pos):
    return float(np.clip(pos, 0.0, dataset.width - 1.0))


def lift(dataset, depth_maps, t, pos):
    """2-D pixel position -> world point via the frame's depth map."""
    d = np.interp(pos, np.arange(dataset.width), depth_maps[t])
    return dataset.cams[t].unproject(np.asarray(pos), np.asarray(d))


def propagate(k_ref, t_ref, dataset: Dataset, depth_maps):
    """Frame-by-frame flow propagation from the reference frame."""
    T = dataset.frames
    u0, front = dataset.cams[t_ref].project(k_ref)
    if not front:
        raise AnalysisError("reference key point behind its reference camera")
    pixels = np.zeros(T)
    clamped = np.zeros(T, dtype=bool)
    provenance = ["frame-by-frame"] * T
    pixels[t_ref] = _clamp(dataset, u0)
    clamped[t_ref] = not 0.0 <= u0 <= dataset.width - 1.0
    provenance[t_ref] = "reference"
    for t in range(t_ref + 1, T):
        raw = _fused_step(dataset, pixels[t - 1], t - 1, +1)
        pixels[t] = _clamp(dataset, raw)
        clamped[t] = raw != pixels[t]
    for t in range(t_ref - 1, -1, -1):
        raw = _fused_step(dataset, pixels[t + 1], t + 1, -1)
        pixels[t] = _clamp(dataset, raw)
        clamped[t] = raw != pixels[t]
    world = np.stack([lift(dataset, depth_maps, t, pixels[t]) for t in range(T)])
    return KeyPointTrack(t_ref=t_ref, pixels=pixels, world=world,
                         confidence=np.full(T, np.nan), provenance=provenance,
                         clamped=clamped)


def compose_flow(dataset, pos, t_from, t_to, fused=False):
    """Position after stepping per-frame flow from t_from to t_to.

    The confidence round trip uses plain steps (the two flow directions
    must stay independent measurements); track anchoring composes with
    the same fused steps as propagation.
    """
    step = _fused_step if fused else _step_flow
    p = float(pos)
    t = t_from
    while t < t_to:
        p = _clamp(dataset, step(dataset, p, t, +1))
        t += 1
    while t > t_to:
        p = _clamp(dataset, step(dataset, p, t, -1))
        t -= 1
    return p


def flow_confidence(dataset, k_ref_px, t_ref, t):
    """Reciprocal forward/backward round-trip error from the reference pixel."""
    there = compose_flow(dataset, k_ref_px, t_ref, t)
    back = compose_flow(dataset, there, t, t_ref)
    return 1.0 / (CONF_EPS + abs(back - float(k_ref_px)))


def skipping_propagate(track: KeyPointTrack, dataset: Dataset, depth_maps,
                       stride=None, conf_threshold=0.5):
    """Replace anchor frames by direct composed-flow positions when confident.

    Anchors sit every `stride` frames away from t_ref on both sides; an
    anchor is accepted when its round-trip confidence clears the
    threshold.  Accepted anchors overwrite the track, and the span up to
    the next accepted anchor (or the sequence end) is re-propagated from
    them continuing away from t_ref; with flow composed from adjacent
    frames the anchors coincide with the frame-by-frame positions, so
    this never increases the accumulated noise.
    """
    T = dataset.frames
    t_ref = track.t_ref
    stride = stride or max(1, int(np.ceil(T / 8)))
    out = KeyPointTrack(t_ref=t_ref, pixels=track.pixels.copy(),
                        world=track.world.copy(),
                        confidence=track.confidence.copy(),
                        provenance=list(track.provenance),
                        clamped=track.clamped.copy())
    anchors = []
    ref_px = track.pixels[t_ref]
    for t in list(range(t_ref + stride, T, stride)) + \
            list(range(t_ref - stride, -1, -stride)):
        conf = flow_confidence(dataset, ref_px, t_ref, t)
        out.confidence[t] = conf
        if conf > conf_threshold:
            out.pixels[t] = compose_flow(dataset, ref_px, t_ref, t, fused=True)
            out.provenance[t] = "skip"
            anchors.append(t)
    for a in sorted(a for a in anchors if a > t_ref):
        nxt = min((b for b in anchors if b > a), default=T)
        for t in range(a + 1, min(nxt, T)):
            raw = _fused_step(dataset, out.pixels[t - 1], t - 1, +1)
            out.pixels[t] = _clamp(dataset, raw)
            out.clamped[t] = raw != out.pixels[t]
    for a in sorted((a for a in anchors if a < t_ref), reverse=True):
        nxt = max((b for b in anchors if b < a), default=-1)
        for t in range(a - 1, max(nxt, -1), -1):
            raw = _fused_step(dataset, out.pixels[t + 1], t + 1, -1)
            out.pixels[t] = _clamp(dataset, raw)
            out.clamped[t] = raw != out.pixels[t]
    changed = out.pixels != track.pixels
    for t in np.flatnonzero(changed):
        out.world[t] = lift(dataset, depth_maps, t, out.pixels[t])
    return out


def analyze_scene(dataset: Dataset, model, cfg: AnalysisConfig | None = None):
    """Full detection + initialization; returns (grid, refs, tracks)."""
    cfg = cfg or AnalysisConfig()
    grid = build_variance_grid(dataset, model, cfg)
    refs = detect_reference_keypoints(grid, cfg)
    from .train import TrainConfig, stage1_maps

    maps = stage1_maps(model, dataset,
                       TrainConfig(depth_samples=max(cfg.render_samples, 128)))
    lo, hi = dataset.scene_bounds()
    delta = cfg.delta_frac * float(np.linalg.norm(hi - lo))
    tracks = []
    for ref in refs:
        ref.t_ref = select_reference_frame(ref.position, maps.depths,
                                           dataset.cams, delta, dataset.width)
        tr = propagate(ref.position, ref.t_ref, dataset, maps.depths)
        if cfg.use_skipping and dataset.frames > 2:
            tr = skipping_propagate(tr, dataset, maps.depths,
                                    stride=cfg.skip_stride or None,
                                    conf_threshold=cfg.conf_threshold)
        tracks.append(tr)
    return grid, refs, tracks


# ---------------------------------------------------------------- tracks IO

def save_tracks(path, tracks):
    doc = {"version": 1, "n_keypoints": len(tracks),
           "tracks": [{
               "t_ref": int(tr.t_ref),
               "pixels": tr.pixels.tolist(),
               "world": tr.world.tolist(),
               "confidence": [None if not np.isfinite(c) else float(c)
                              for c in tr.confidence],
               "provenance": tr.provenance,
               "clamped": tr.clamped.astype(bool).tolist(),
           } for tr in tracks]}
    Path(path).write_text(json.dumps(doc))


def load_tracks(path):
    doc = json.loads(Path(path).read_text())
    tracks = []
    for tr in doc["tracks"]:
        conf = np.array([np.nan if c is None else c for c in tr["confidence"]])
        tracks.append(KeyPointTrack(
            t_ref=tr["t_ref"], pixels=np.asarray(tr["pixels"], dtype=np.float64),
            world=np.asarray(tr["world"], dtype=np.float64), confidence=conf,
            provenance=list(tr["provenance"]),
            clamped=np.asarray(tr["clamped"], dtype=bool)))
    return tracks
