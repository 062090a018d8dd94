"""Loading of generated dataset directories into memory."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import Camera, camera_from_json


@dataclass
class Dataset:
    root: Path
    frames: int
    width: int
    near: float
    far: float
    background: np.ndarray
    flow_sigma: float
    image_sigma: float
    cams: list
    images: np.ndarray    # (T, W, 3) float64 in [0, 1]
    depths: np.ndarray    # (T, W)
    masks: np.ndarray     # (T, W) uint16
    _fw: np.ndarray       # (T-1, W) flow t -> t+1
    _bw: np.ndarray       # (T-1, W) flow t -> t-1, index t-1
    gt_world: np.ndarray | None   # (T, P, 2)
    gt_pixel: np.ndarray | None   # (T, P)

    @classmethod
    def load(cls, root):
        root = Path(root)
        meta = json.loads((root / "meta.json").read_text())
        T, W = meta["frames"], meta["width"]
        near, far = meta["near"], meta["far"]
        cams = [camera_from_json(c, W, near, far) for c in meta["cameras"]]

        def read(path, dtype, count):
            data = np.fromfile(path, dtype=dtype)
            if data.size != count:
                raise ValueError(f"{path.name}: expected {count} values, got {data.size}")
            return data

        images = np.stack([
            read(root / "rgb" / f"{t:05d}.bin", "<f4", W * 3).reshape(W, 3).astype(np.float64)
            for t in range(T)])
        depths = np.stack([
            read(root / "depth" / f"{t:05d}.bin", "<f4", W).astype(np.float64)
            for t in range(T)])
        masks = np.stack([
            read(root / "masks" / f"{t:05d}.bin", "<u2", W) for t in range(T)])
        fw = (np.stack([read(root / "flow" / f"{t:05d}_fw.bin", "<f4", W).astype(np.float64)
                        for t in range(T - 1)]) if T > 1 else np.zeros((0, W)))
        bw = (np.stack([read(root / "flow" / f"{t:05d}_bw.bin", "<f4", W).astype(np.float64)
                        for t in range(1, T)]) if T > 1 else np.zeros((0, W)))

        gt_world = gt_pixel = None
        gt_path = root / "gt_tracks.json"
        if gt_path.exists():
            gt = json.loads(gt_path.read_text())
            tracks = gt.get("tracks", [])
            if tracks:
                gt_world = np.stack([np.asarray(tr["world"]) for tr in tracks], axis=1)
                gt_pixel = np.stack([np.asarray(tr["pixel"]) for tr in tracks], axis=1)
            else:
                gt_world = np.zeros((T, 0, 2))
                gt_pixel = np.zeros((T, 0))

        noise = meta.get("noise", {})
        return cls(root=root, frames=T, width=W, near=near, far=far,
                   background=np.asarray(meta["background"], dtype=np.float64),
                   flow_sigma=float(noise.get("flow_sigma", 0.0)),
                   image_sigma=float(noise.get("image_sigma", 0.0)),
                   cams=cams, images=images, depths=depths, masks=masks,
                   _fw=fw, _bw=bw, gt_world=gt_world, gt_pixel=gt_pixel)

    def flow_fw(self, t):
        """Flow t -> t+1 sampled per pixel of frame t."""
        return self._fw[t]

    def flow_bw(self, t):
        """Flow t -> t-1 sampled per pixel of frame t."""
        return self._bw[t - 1]

    @property
    def n_tracks(self):
        return 0 if self.gt_world is None else self.gt_world.shape[1]

    def scene_bounds(self):
        """Conservative world bounds covered by the camera frusta."""
        pts = []
        for cam in self.cams:
            for u in (0.0, self.width - 1.0):
                for z in (self.near, self.far):
                    pts.append(cam.unproject(np.array(u), np.array(z)))
            pts.append(cam.o)
        pts = np.asarray(pts)
        return pts.min(axis=0), pts.max(axis=0)
