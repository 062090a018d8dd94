"""Two-stage training: baseline hyperspace model, then the key-point model.

Stage 1 fits the warp + ambient + H1 pipeline with reconstruction and
warp regularization, then renders fixed per-frame depth/opacity maps.
Stage 2 optimizes the key-point pipeline (warp, weights, radiance, latent
tables, key-point positions) with the full four-term objective.

BLAS threading: the many small dgemms here run fastest single-threaded
on small hosts; KPFIELD_BLAS_THREADS (default 1) caps the pool inside
the training loops.
"""

from __future__ import annotations

import contextlib
import json
import os
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np


def blas_limit():
    """Context manager capping BLAS threads per KPFIELD_BLAS_THREADS."""
    n = int(os.environ.get("KPFIELD_BLAS_THREADS", "1"))
    if n <= 0:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=n, user_api="blas")
    except ImportError:
        return contextlib.nullcontext()


def _blas_limited(fn):
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with blas_limit():
            return fn(*args, **kwargs)

    return wrapper

from . import autodiff as ad
from .dataset import Dataset
from .fields import ModelConfig, SceneModel
from .losses import LossWeights, loss_geo, loss_motion, loss_rec, loss_reg
from .optim import Adam, LrSchedule
from .render import (RenderConfig, ambient_magnitude, psnr, ray_distortion,
                     render_image, render_rays)


class TrainingDiverged(RuntimeError):
    def __init__(self, stage, step, parts):
        detail = ", ".join(f"{k}={v:.4g}" for k, v in parts.items())
        super().__init__(f"stage-{stage} diverged at step {step}: {detail}")
        self.stage, self.step, self.parts = stage, step, parts


@dataclass
class TrainConfig:
    stage1_steps: int = 20_000
    stage2_steps: int = 30_000
    rays_per_batch: int = 512
    samples_per_ray: int = 64
    seed: int = 0
    lr: float = 1e-3
    lr_final: float = 1e-4
    lr_latents: float = 1e-3
    lr_keypoints: float = 1e-2
    weights: LossWeights = field(default_factory=LossWeights)
    surface_refresh: int = 500
    surface_pool: int = 256
    reg_points_per_step: int = 128
    kp_pairs_per_step: int = 512
    anneal_warp: bool = False
    anneal_frac: float = 0.2
    kp_warmup_steps: int = 300
    depth_samples: int = 128
    log_every: int = 200
    probe_every: int = 2000
    probe_frame: int = 0

    def to_json(self):
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class Stage1Maps:
    depths: np.ndarray     # (T, W) fixed depth maps from the stage-1 model
    opacities: np.ndarray  # (T, W)


class MetricsLog:
    """Line-delimited JSON records, optionally mirrored to a file."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, **rec):
        self.records.append(rec)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")


def model_for_dataset(dataset: Dataset, n_keypoints=1, model_cfg: ModelConfig | None = None,
                      seed=0):
    """Build a SceneModel whose encoding bounds cover the camera frusta."""
    lo, hi = dataset.scene_bounds()
    pad = 0.05 * (hi - lo)
    cfg = model_cfg or ModelConfig()
    cfg.d = 2
    cfg.n_frames = dataset.frames
    cfg.n_keypoints = n_keypoints
    cfg.bounds_lo = tuple(lo - pad)
    cfg.bounds_hi = tuple(hi + pad)
    return SceneModel(cfg, seed=seed)


class _RayBank:
    """Precomputed per-frame pixel rays and targets."""

    def __init__(self, dataset: Dataset):
        self.origins = np.stack([dataset.cams[t].pixel_rays()[0]
                                 for t in range(dataset.frames)])
        self.dirs = np.stack([dataset.cams[t].pixel_rays()[1]
                              for t in range(dataset.frames)])
        self.targets = dataset.images

    def batch(self, rng, n):
        t = rng.integers(0, self.targets.shape[0], n)
        u = rng.integers(0, self.targets.shape[1], n)
        return (self.origins[t, u], self.dirs[t, u], t.astype(np.int64),
                self.targets[t, u])


class _SurfacePools:
    """Per-frame pools of expected-termination points (opacity > 0.5)."""

    def __init__(self, dataset, cap):
        self.dataset = dataset
        self.cap = cap
        self.pts = {}

    def refresh(self, model, stage, rng, samples):
        cfg = RenderConfig(n_samples=samples, background=tuple(self.dataset.background))
        self.pts = {}
        for t in range(self.dataset.frames):
            out = render_image(model, self.dataset.cams[t], t, cfg, stage=stage,
                               seed=int(rng.integers(1 << 31)))
            keep = out.opacity > 0.5
            if not keep.any():
                continue
            dirs = self.dataset.cams[t].pixel_rays()[1][keep]
            pts = self.dataset.cams[t].o + out.depth[keep, None] * dirs
            if pts.shape[0] > self.cap:
                pts = pts[rng.choice(pts.shape[0], self.cap, replace=False)]
            self.pts[t] = pts

    def sample(self, rng, n):
        if not self.pts:
            return None, None
        frames = list(self.pts)
        all_pts = np.concatenate([self.pts[t] for t in frames])
        all_t = np.concatenate([np.full(len(self.pts[t]), t) for t in frames])
        if all_pts.shape[0] > n:
            sel = rng.choice(all_pts.shape[0], n, replace=False)
            return all_pts[sel], all_t[sel].astype(np.int64)
        return all_pts, all_t.astype(np.int64)


def _window(cfg, model, step, total):
    if not cfg.anneal_warp:
        return None
    ramp = min(1.0, step / max(1.0, cfg.anneal_frac * total))
    return ramp * model.enc_spatial.nbands


def _setup_lr_scales(model, cfg):
    base = cfg.lr
    model.store["beta"].lr_scale = cfg.lr_latents / base
    model.store["alpha"].lr_scale = cfg.lr_latents / base
    model.store["omega"].lr_scale = cfg.lr_latents / base
    model.store["keypoints"].lr_scale = cfg.lr_keypoints / base


def _schedule(cfg, steps):
    return LrSchedule(base=cfg.lr, decay_factor=cfg.lr_final / cfg.lr,
                      decay_interval=max(steps, 1))


@_blas_limited
def train_stage1(dataset: Dataset, cfg: TrainConfig, model: SceneModel = None,
                 model_cfg: ModelConfig | None = None, log: MetricsLog | None = None):
    """Fit the baseline model; returns (model, Stage1Maps)."""
    model = model or model_for_dataset(dataset, model_cfg=model_cfg, seed=cfg.seed)
    log = log or MetricsLog()
    model.set_stage(1)
    _setup_lr_scales(model, cfg)
    opt = Adam(model.store, _schedule(cfg, cfg.stage1_steps))
    rng = np.random.default_rng(cfg.seed)
    bank = _RayBank(dataset)
    pools = _SurfacePools(dataset, cfg.surface_pool)
    rcfg = RenderConfig(n_samples=cfg.samples_per_ray, jitter=True,
                        background=tuple(dataset.background))
    t0 = time.perf_counter()

    for step in range(cfg.stage1_steps):
        if cfg.surface_refresh and step and step % cfg.surface_refresh == 0:
            pools.refresh(model, 1, rng, cfg.samples_per_ray)
        window = _window(cfg, model, step, cfg.stage1_steps)
        o, d, t_idx, target = bank.batch(rng, cfg.rays_per_batch)
        tape = ad.Tape()
        with tape:
            rgb, _, graph = render_rays(model, o, d, t_idx, rcfg, dataset.near,
                                        dataset.far, stage=1, rng=rng, tape=tape,
                                        warp_window=window)
            l_rec = loss_rec(rgb, target)
            parts = {"rec": float(l_rec.data)}
            total = l_rec
            if cfg.weights.distortion > 0:
                l_dist = ray_distortion(graph)
                parts["dist"] = float(l_dist.data)
                total = ad.add(total, ad.scale(l_dist, cfg.weights.distortion))
            if cfg.weights.ambient > 0:
                l_amb = ambient_magnitude(graph)
                parts["amb"] = float(l_amb.data)
                total = ad.add(total, ad.scale(l_amb, cfg.weights.ambient))
            pts, pt_t = pools.sample(rng, cfg.reg_points_per_step)
            if pts is not None and cfg.weights.reg > 0:
                l_reg = loss_reg(model, pts, pt_t, tape, warp_window=window)
                parts["reg"] = float(l_reg.data)
                total = ad.add(total, ad.scale(l_reg, cfg.weights.reg))
        if not np.isfinite(total.data):
            raise TrainingDiverged(1, step, parts)
        tape.backward(total)
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.stage1_steps - 1:
            rec = dict(stage=1, step=step, lr=opt.schedule.rate(opt.step_count),
                       **parts)
            if cfg.probe_every and step and step % cfg.probe_every == 0:
                rec["psnr"] = probe_psnr(model, dataset, cfg, stage=1)
            log.log(**rec)

    log.log(stage=1, step=cfg.stage1_steps, done=True,
            seconds=round(time.perf_counter() - t0, 2),
            psnr=probe_psnr(model, dataset, cfg, stage=1) if cfg.stage1_steps else None)
    return model, stage1_maps(model, dataset, cfg)


@_blas_limited
def stage1_maps(model, dataset, cfg: TrainConfig):
    """Fixed depth/opacity maps rendered from the stage-1 model."""
    rcfg = RenderConfig(n_samples=cfg.depth_samples,
                        background=tuple(dataset.background))
    depths = np.zeros((dataset.frames, dataset.width))
    ops = np.zeros((dataset.frames, dataset.width))
    for t in range(dataset.frames):
        out = render_image(model, dataset.cams[t], t, rcfg, stage=1, seed=0)
        depths[t] = out.depth
        ops[t] = out.opacity
    return Stage1Maps(depths=depths, opacities=ops)


def probe_psnr(model, dataset, cfg, stage=2, frame=None):
    frame = cfg.probe_frame if frame is None else frame
    rcfg = RenderConfig(n_samples=cfg.samples_per_ray,
                        background=tuple(dataset.background))
    out = render_image(model, dataset.cams[frame], frame, rcfg, stage=stage, seed=0)
    return psnr(out.color, dataset.images[frame])


def _kp_pair_subset(rng, n_frames, n_kp, cap):
    """All (t, i) pairs when small, otherwise a random subset of them."""
    total = (n_frames - 1) * n_kp
    if total <= cap:
        t = np.repeat(np.arange(n_frames - 1), n_kp)
        i = np.tile(np.arange(n_kp), n_frames - 1)
        return t, i
    sel = rng.choice(total, cap, replace=False)
    return (sel // n_kp).astype(np.int64), (sel % n_kp).astype(np.int64)


def init_keypoints_from_tracks(model, world_tracks, t_ref):
    """Install initial per-frame key-point positions and reference frames."""
    world = np.asarray(world_tracks, dtype=np.float64)
    cfg = model.cfg
    if world.shape != (cfg.n_frames, cfg.n_keypoints, cfg.d):
        raise ValueError(f"track array must be (T, N, D), got {world.shape}")
    model.set_keypoint_positions(world)
    model.keypoints.t_ref = np.asarray(t_ref, dtype=np.int64)


@_blas_limited
def _kp_warmup(dataset, model, maps, cfg, log):
    """Polish key-point positions with motion+geometry before joint training.

    The radiance field co-adapts to whatever trajectory it first sees, so
    flow-inconsistent jitter in the initialization is easiest to remove
    while the positions are still the only thing moving.
    """
    for name, blk in model.store.items():
        blk.trainable = name == "keypoints"
    model.store["keypoints"].lr_scale = 1.0
    opt = Adam(model.store, LrSchedule(base=cfg.lr_keypoints, decay_factor=1.0))
    rng = np.random.default_rng(cfg.seed + 7)
    for step in range(cfg.kp_warmup_steps):
        tp, ip = _kp_pair_subset(rng, dataset.frames, model.cfg.n_keypoints,
                                 cfg.kp_pairs_per_step)
        tg = np.repeat(np.arange(dataset.frames), model.cfg.n_keypoints)
        ig = np.tile(np.arange(model.cfg.n_keypoints), dataset.frames)
        tape = ad.Tape()
        with tape:
            l_mot, _ = loss_motion(model, dataset, tp, ip, tape)
            l_geo, _ = loss_geo(model, dataset, maps.depths, maps.opacities,
                                tg, ig, tape)
            total = ad.add(ad.scale(l_mot, cfg.weights.motion),
                           ad.scale(l_geo, cfg.weights.geo))
        if not np.isfinite(total.data):
            raise TrainingDiverged(2, step, {"warmup": float(total.data)})
        tape.backward(total)
        opt.step()
        if step % cfg.log_every == 0:
            log.log(stage=2, warmup=step, motion=float(l_mot.data),
                    geo=float(l_geo.data))


def train_stage2(dataset: Dataset, model: SceneModel, maps: Stage1Maps,
                 cfg: TrainConfig, log: MetricsLog | None = None):
    """Joint optimization of the key-point pipeline; returns the model."""
    log = log or MetricsLog()
    if cfg.kp_warmup_steps > 0:
        _kp_warmup(dataset, model, maps, cfg, log)
    model.set_stage(2)
    _setup_lr_scales(model, cfg)
    opt = Adam(model.store, _schedule(cfg, cfg.stage2_steps))
    rng = np.random.default_rng(cfg.seed + 1)
    bank = _RayBank(dataset)
    pools = _SurfacePools(dataset, cfg.surface_pool)
    rcfg = RenderConfig(n_samples=cfg.samples_per_ray, jitter=True,
                        background=tuple(dataset.background))
    lo = np.asarray(model.cfg.bounds_lo)
    hi = np.asarray(model.cfg.bounds_hi)
    slack = 0.2 * model.scene_diagonal()
    t0 = time.perf_counter()

    for step in range(cfg.stage2_steps):
        if cfg.surface_refresh and step and step % cfg.surface_refresh == 0:
            pools.refresh(model, 2, rng, cfg.samples_per_ray)
        window = _window(cfg, model, step, cfg.stage2_steps)
        o, d, t_idx, target = bank.batch(rng, cfg.rays_per_batch)
        tp, ip = _kp_pair_subset(rng, dataset.frames, model.cfg.n_keypoints,
                                 cfg.kp_pairs_per_step)
        tape = ad.Tape()
        with tape:
            rgb, _, graph = render_rays(model, o, d, t_idx, rcfg, dataset.near,
                                        dataset.far, stage=2, rng=rng, tape=tape,
                                        warp_window=window)
            l_rec = loss_rec(rgb, target)
            total = l_rec
            parts = {"rec": float(l_rec.data)}
            if cfg.weights.distortion > 0:
                l_dist = ray_distortion(graph)
                parts["dist"] = float(l_dist.data)
                total = ad.add(total, ad.scale(l_dist, cfg.weights.distortion))
            if cfg.weights.motion > 0:
                l_mot, n_mot = loss_motion(model, dataset, tp, ip, tape)
                parts["motion"] = float(l_mot.data)
                total = ad.add(total, ad.scale(l_mot, cfg.weights.motion))
            if cfg.weights.geo > 0:
                l_geo, n_geo = loss_geo(model, dataset, maps.depths,
                                        maps.opacities, tp, ip, tape)
                parts["geo"] = float(l_geo.data)
                total = ad.add(total, ad.scale(l_geo, cfg.weights.geo))
            pts, pt_t = pools.sample(rng, cfg.reg_points_per_step)
            if pts is not None and cfg.weights.reg > 0:
                l_reg = loss_reg(model, pts, pt_t, tape, warp_window=window)
                parts["reg"] = float(l_reg.data)
                total = ad.add(total, ad.scale(l_reg, cfg.weights.reg))
        if not np.isfinite(total.data):
            raise TrainingDiverged(2, step, parts)
        tape.backward(total)
        opt.step()

        if model.store["keypoints"].trainable:
            kp = model.store.get("keypoints")
            out_lo = kp < (lo - slack)
            out_hi = kp > (hi + slack)
            if out_lo.any() or out_hi.any():
                warnings.warn("key point left the scene bounds; clamping")
                model.store.set("keypoints",
                                np.clip(kp, lo - slack, hi + slack))

        if step % cfg.log_every == 0 or step == cfg.stage2_steps - 1:
            rec = dict(stage=2, step=step, lr=opt.schedule.rate(opt.step_count),
                       **parts)
            if cfg.probe_every and step and step % cfg.probe_every == 0:
                rec["psnr"] = probe_psnr(model, dataset, cfg, stage=2)
            log.log(**rec)

    log.log(stage=2, step=cfg.stage2_steps, done=True,
            seconds=round(time.perf_counter() - t0, 2),
            psnr=probe_psnr(model, dataset, cfg, stage=2) if cfg.stage2_steps else None)
    return model
