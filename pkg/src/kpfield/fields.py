"""Scene model: warp field, key-point weights, hyperspace radiance fields.

The full model bundles two radiance pipelines sharing one warp field and
one set of per-frame latent tables:

  stage 1   x -> warp -> enc(x') (+) enc(ambient(x, omega_t)) -> H1
  stage 2   x -> warp -> enc(x') (+) enc(p) -> H,  p = weighted key points

Stage 1 is the baseline hyperspace model used to produce depth maps and
the ambient coordinates that drive key-point detection; stage 2 replaces
the ambient input with the weighted key points and is what gets edited.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .encoding import PositionalEncoder
from .mlp import MLPSpec, mlp_forward
from .params import ParamStore


@dataclass
class ModelConfig:
    d: int = 2
    n_frames: int = 1
    n_keypoints: int = 1
    ambient_dim: int = 2
    beta_dim: int = 8
    alpha_dim: int = 4
    omega_dim: int = 8
    warp_hidden: tuple = (64, 64, 64, 64)
    weight_hidden: tuple = (64, 64, 64, 64)
    trunk_hidden: tuple = (128,) * 6
    trunk_skip: int = 3
    color_hidden: int = 64
    bands_spatial: int = 6
    bands_aux: int = 2
    bands_view: int = 2
    bounds_lo: tuple = (-1.0, -1.0)
    bounds_hi: tuple = (1.0, 1.0)
    keypoint_lr_scale: float = 10.0
    density_bias: float = -4.0

    def scaled(self, factor):
        """Uniformly shrunk variant (desk-budget presets)."""
        f = lambda t: tuple(max(8, int(round(w * factor))) for w in t)
        return replace(self, warp_hidden=f(self.warp_hidden),
                       weight_hidden=f(self.weight_hidden),
                       trunk_hidden=f(self.trunk_hidden),
                       color_hidden=max(8, int(round(self.color_hidden * factor))))

    def to_json(self):
        from dataclasses import asdict

        return asdict(self)

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        for k in ("warp_hidden", "weight_hidden", "trunk_hidden",
                  "bounds_lo", "bounds_hi"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class KeyPointSet:
    """Per-frame key-point positions plus each track's reference frame."""

    n_frames: int
    n_keypoints: int
    d: int
    t_ref: np.ndarray  # (N,) int

    def __post_init__(self):
        if self.n_keypoints < 1:
            raise ValueError("need at least one key point")
        t_ref = np.asarray(self.t_ref, dtype=np.int64)
        if t_ref.shape != (self.n_keypoints,):
            raise ValueError("t_ref must have one entry per key point")
        if np.any((t_ref < 0) | (t_ref >= self.n_frames)):
            raise ValueError("t_ref out of range")
        self.t_ref = t_ref


class SceneModel:
    """All learned parts of the scene plus their evaluation graph."""

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        self.store = ParamStore()
        self.keypoints = KeyPointSet(cfg.n_frames, cfg.n_keypoints, cfg.d,
                                     np.zeros(cfg.n_keypoints, dtype=np.int64))
        rng = np.random.default_rng(seed)

        self.enc_spatial = PositionalEncoder(cfg.bands_spatial)
        self.enc_aux = PositionalEncoder(cfg.bands_aux)
        self.enc_view = PositionalEncoder(cfg.bands_view)

        d = cfg.d
        sp = self.enc_spatial.out_dim(d)
        aux_kp = self.enc_aux.out_dim(d)
        aux_am = self.enc_aux.out_dim(cfg.ambient_dim)
        view = self.enc_view.out_dim(d)

        self.warp_spec = MLPSpec("warp", (sp + cfg.beta_dim, *cfg.warp_hidden, d),
                                 zero_init_last=True)
        self.weight_spec = MLPSpec("wnet", (sp, *cfg.weight_hidden, cfg.n_keypoints))
        self.ambient_spec = MLPSpec(
            "amb", (sp + cfg.omega_dim, *cfg.warp_hidden, cfg.ambient_dim),
            zero_init_last=True)

        def radiance_specs(prefix, aux_dim):
            trunk = MLPSpec(f"{prefix}.trunk", (sp + aux_dim, *cfg.trunk_hidden),
                            skips=(cfg.trunk_skip,))
            dens = MLPSpec(f"{prefix}.dens", (cfg.trunk_hidden[-1], 1))
            col = MLPSpec(f"{prefix}.color",
                          (cfg.trunk_hidden[-1] + view + cfg.alpha_dim,
                           cfg.color_hidden, 3))
            return trunk, dens, col

        self.h2_trunk, self.h2_dens, self.h2_color = radiance_specs("h2", aux_kp)
        self.h1_trunk, self.h1_dens, self.h1_color = radiance_specs("h1", aux_am)

        for spec in (self.warp_spec, self.weight_spec, self.ambient_spec,
                     self.h2_trunk, self.h2_dens, self.h2_color,
                     self.h1_trunk, self.h1_dens, self.h1_color):
            spec.build(self.store, rng)
        for prefix in ("h1", "h2"):
            # start near-transparent so an untrained render is background
            self.store.set(f"{prefix}.dens.w0",
                           self.store.get(f"{prefix}.dens.w0") * 0.1)
            self.store.set(f"{prefix}.dens.b0", np.array([cfg.density_bias]))

        self.store.add("beta", rng.standard_normal((cfg.n_frames, cfg.beta_dim)) * 1e-2)
        self.store.add("alpha", rng.standard_normal((cfg.n_frames, cfg.alpha_dim)) * 1e-2)
        self.store.add("omega", rng.standard_normal((cfg.n_frames, cfg.omega_dim)) * 1e-2)
        self.store.add("keypoints",
                       np.zeros((cfg.n_frames * cfg.n_keypoints, cfg.d)),
                       lr_scale=cfg.keypoint_lr_scale)

    # ------------------------------------------------------------- plumbing

    @property
    def n_keypoints(self):
        return self.cfg.n_keypoints

    def keypoint_positions(self):
        """(T, N, D) view of the key-point table."""
        cfg = self.cfg
        return self.store.get("keypoints").reshape(cfg.n_frames, cfg.n_keypoints, cfg.d)

    def set_keypoint_positions(self, k):
        k = np.asarray(k, dtype=np.float64)
        cfg = self.cfg
        self.store.set("keypoints", k.reshape(cfg.n_frames * cfg.n_keypoints, cfg.d))

    def _normalize(self, x):
        lo = np.asarray(self.cfg.bounds_lo)
        hi = np.asarray(self.cfg.bounds_hi)
        return ad.shift_scale(x, (lo + hi) / 2.0, 2.0 / (hi - lo))

    def _enc_pos(self, x):
        return self.enc_spatial.encode(self._normalize(x))

    def _param_or_const(self, tape, name):
        if tape is not None:
            return tape.param(self.store, name)
        return ad.const(self.store.get(name))

    def _gather_latent(self, tape, name, t_idx):
        table = self._param_or_const(tape, name)
        return ad.gather(table, np.asarray(t_idx, dtype=np.int64))

    def scene_diagonal(self):
        lo = np.asarray(self.cfg.bounds_lo)
        hi = np.asarray(self.cfg.bounds_hi)
        return float(np.linalg.norm(hi - lo))

    # ------------------------------------------------------------ field ops

    def warp(self, x, beta, tape=None, window=None):
        """x' = x + residual(x, beta); x (B,D) Var, beta (B,beta_dim) Var."""
        enc = self.enc_spatial
        if window is not None:
            enc = PositionalEncoder(enc.nbands, enc.include_identity, window)
        feat = enc.encode(self._normalize(x))
        delta = mlp_forward(ad.concat([feat, beta]), self.warp_spec, self.store, tape)
        return ad.add(x, delta)

    def keypoint_weights(self, xp, tape=None, feat=None):
        """Softmax weights over key points for canonical points xp (B,D).

        feat optionally carries the already-encoded xp to share work with
        the radiance trunk.
        """
        if self.cfg.n_keypoints < 2:
            raise ValueError("weight network is bypassed for a single key point")
        if feat is None:
            feat = self._enc_pos(xp)
        logits = mlp_forward(feat, self.weight_spec, self.store, tape)
        return ad.softmax(logits)

    def weighted_keypoints(self, xp, k, tape=None, feat=None):
        """p = sum_i w_i(xp) k_i.

        k is a Var of shape (N, D) shared across the batch, or (B, N, D)
        per sample.  With one key point the weights are bypassed and p is
        the key-point position itself.
        """
        b = xp.data.shape[0]
        n, d = self.cfg.n_keypoints, self.cfg.d
        if n == 1:
            if k.data.ndim == 2:
                return ad.gather(k, np.zeros(b, dtype=np.int64))
            return ad.reshape(k, (b, d))
        w = self.keypoint_weights(xp, tape, feat=feat)
        if k.data.ndim == 2:
            return ad.matmul(w, k)
        return ad.kpmix(w, ad.reshape(k, (b, n, d)))

    def ambient(self, x, omega, tape=None):
        """Stage-1 ambient coordinates for raw (un-warped) points."""
        feat = ad.concat([self._enc_pos(x), omega])
        return mlp_forward(feat, self.ambient_spec, self.store, tape)

    def _radiance(self, prefix_specs, xp, aux_coords, view_dir, alpha, tape,
                  feat=None):
        trunk_spec, dens_spec, color_spec = prefix_specs
        enc_aux_in = self.enc_aux.encode(aux_coords)
        if feat is None:
            feat = self._enc_pos(xp)
        h = mlp_forward(ad.concat([feat, enc_aux_in]),
                        trunk_spec, self.store, tape)
        sigma = ad.softplus(mlp_forward(h, dens_spec, self.store, tape))
        dfeat = self.enc_view.encode(view_dir)
        cin = ad.concat([h, dfeat, alpha])
        rgb = ad.sigmoid(mlp_forward(cin, color_spec, self.store, tape))
        return rgb, ad.reshape(sigma, (xp.data.shape[0],))

    def radiance(self, xp, p, view_dir, alpha, tape=None, feat=None):
        """Stage-2 field: density from (x', p); color also sees (d, alpha)."""
        aux = self._normalize(p)
        return self._radiance((self.h2_trunk, self.h2_dens, self.h2_color),
                              xp, aux, view_dir, alpha, tape, feat=feat)

    def radiance_stage1(self, xp, a, view_dir, alpha, tape=None):
        return self._radiance((self.h1_trunk, self.h1_dens, self.h1_color),
                              xp, a, view_dir, alpha, tape)

    # --------------------------------------------------------- batched eval

    def field_stage2(self, x, t_idx, view_dir, tape=None, k_override=None,
                     warp_window=None):
        """Evaluate the full stage-2 pipeline on world points x (B,D).

        t_idx (B,) selects per-sample latent rows (and key-point rows when
        no override is given).  k_override (N,D) replaces the stored
        per-frame positions for every sample (the editing path).
        Returns (rgb Var (B,3), sigma Var (B,), xp Var (B,D)).
        """
        cfg = self.cfg
        t_idx = np.asarray(t_idx, dtype=np.int64)
        b = x.data.shape[0]
        beta = self._gather_latent(tape, "beta", t_idx)
        alpha = self._gather_latent(tape, "alpha", t_idx)
        xp = self.warp(x, beta, tape, window=warp_window)
        if k_override is not None:
            # tile to per-sample rows so the mixing kernel (and hence the
            # bit pattern) matches the stored-positions path exactly
            arr = np.asarray(k_override, dtype=np.float64)
            k = ad.const(np.broadcast_to(arr, (b, cfg.n_keypoints, cfg.d)).copy())
        else:
            table = self._param_or_const(tape, "keypoints")
            flat_idx = (t_idx[:, None] * cfg.n_keypoints
                        + np.arange(cfg.n_keypoints)[None, :]).ravel()
            k = ad.reshape(ad.gather(table, flat_idx), (b, cfg.n_keypoints, cfg.d))
        feat = self._enc_pos(xp)  # shared by the weight net and the trunk
        p = self.weighted_keypoints(xp, k, tape, feat=feat)
        rgb, sigma = self.radiance(xp, p, view_dir, alpha, tape, feat=feat)
        return rgb, sigma, xp

    def field_stage1(self, x, t_idx, view_dir, tape=None, warp_window=None):
        """Stage-1 pipeline on world points x (B,D)."""
        t_idx = np.asarray(t_idx, dtype=np.int64)
        beta = self._gather_latent(tape, "beta", t_idx)
        alpha = self._gather_latent(tape, "alpha", t_idx)
        omega = self._gather_latent(tape, "omega", t_idx)
        xp = self.warp(x, beta, tape, window=warp_window)
        a = self.ambient(x, omega, tape)
        rgb, sigma = self.radiance_stage1(xp, a, view_dir, alpha, tape)
        return rgb, sigma, xp, a

    def ambient_array(self, x, t):
        """Ambient coordinates for points x (B,D) in frame t, no grads."""
        b = np.atleast_2d(np.asarray(x, dtype=np.float64)).shape[0]
        omega = ad.const(np.repeat(self.store.get("omega")[t][None, :], b, axis=0))
        return self.ambient(ad.const(np.atleast_2d(x)), omega).data

    # ---------------------------------------------------------- stage gates

    STAGE1_PREFIXES = ("warp.", "amb.", "h1.")
    STAGE2_PREFIXES = ("warp.", "wnet.", "h2.")

    def set_stage(self, stage, train_keypoints=True):
        """Freeze/unfreeze blocks for the given training stage."""
        for name, blk in self.store.items():
            if name == "keypoints":
                blk.trainable = stage == 2 and train_keypoints
            elif name in ("beta", "alpha"):
                blk.trainable = True
            elif name == "omega":
                blk.trainable = stage == 1
            else:
                pref = name.split(".", 1)[0] + "."
                if stage == 1:
                    blk.trainable = pref in self.STAGE1_PREFIXES
                else:
                    blk.trainable = pref in self.STAGE2_PREFIXES
