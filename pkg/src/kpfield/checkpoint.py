"""Checkpoint file format: one JSON header line, then parameter blocks.

Each block is a little-endian uint64 value count followed by that many
little-endian float64 values, in header order.  Raw float64 bytes make
the save/load round trip bitwise exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .fields import ModelConfig, SceneModel

FORMAT_VERSION = 1


def save_checkpoint(path, model: SceneModel, dataset_meta=None, train_cfg=None):
    """Write the model (and optional dataset/camera context) to path."""
    blocks = model.store.state_arrays()
    header = {
        "format_version": FORMAT_VERSION,
        "model": model.cfg.to_json(),
        "d": model.cfg.d,
        "n_keypoints": model.cfg.n_keypoints,
        "n_frames": model.cfg.n_frames,
        "t_ref": model.keypoints.t_ref.tolist(),
        "blocks": [{
            "name": name,
            "shape": list(data.shape),
            "trainable": model.store[name].trainable,
            "lr_scale": model.store[name].lr_scale,
        } for name, data in blocks],
        "dataset_meta": dataset_meta,
        "train_cfg": train_cfg,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        for _, data in blocks:
            flat = np.ascontiguousarray(data, dtype="<f8").ravel()
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (SceneModel, header dict)."""
    path = Path(path)
    with path.open("rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}")
        cfg = ModelConfig.from_json(header["model"])
        model = SceneModel(cfg, seed=0)
        model.keypoints.t_ref = np.asarray(header["t_ref"], dtype=np.int64)
        for meta in header["blocks"]:
            raw = fh.read(8)
            if len(raw) != 8:
                raise ValueError(f"truncated checkpoint at block {meta['name']!r}")
            (count,) = struct.unpack("<Q", raw)
            want = int(np.prod(meta["shape"])) if meta["shape"] else 1
            if count != want:
                raise ValueError(
                    f"block {meta['name']!r}: expected {want} values, got {count}")
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"truncated payload in block {meta['name']!r}")
            data = np.frombuffer(buf, dtype="<f8").reshape(meta["shape"]).copy()
            model.store.set(meta["name"], data)
            model.store[meta["name"]].trainable = meta["trainable"]
            model.store[meta["name"]].lr_scale = meta["lr_scale"]
    return model, header


def dataset_meta_for(dataset):
    """Camera and framing context embedded so renders work standalone."""
    return {
        "width": dataset.width,
        "near": dataset.near,
        "far": dataset.far,
        "background": dataset.background.tolist(),
        "cameras": [c.to_json() for c in dataset.cams],
    }


def cameras_from_meta(meta):
    from .cameras import camera_from_json

    return [camera_from_json(c, meta["width"], meta["near"], meta["far"])
            for c in meta["cameras"]]
