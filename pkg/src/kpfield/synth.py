"""Synthetic flatland scenes with exact images, depth, flow, and tracks.

A scene is a set of rigid 2-D shapes: dynamic parts carry a per-frame
translation script and a marker point (the ground-truth key point),
static shapes stay put.  Rasterization casts one ray per pixel against
all shapes with front-most occlusion, which makes the generator an exact
oracle for depth, optical flow, and part visibility.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import Camera


@dataclass
class Shape:
    kind: str            # "rect" | "disc" | "tint"
    center: np.ndarray   # (2,) at rest
    size: np.ndarray     # rect/tint: (w, h); disc: (r, 0)
    color: np.ndarray    # rgb for solids, multiplicative factors for tints

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)

    def to_json(self):
        return {"kind": self.kind, "center": self.center.tolist(),
                "size": self.size.tolist(), "color": self.color.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(d["kind"], d["center"], d["size"], d["color"])

    def contains(self, pts, offset):
        """Point-in-region test (tints and rects)."""
        rel = np.abs(pts - (self.center + offset))
        half = self.size / 2.0
        return np.all(rel <= half, axis=-1)

    def ray_hits(self, origins, dirs, offset):
        """First-hit distances (R,) against this shape shifted by offset."""
        if self.kind == "tint":
            return np.full(origins.shape[0], np.inf)  # decals occupy nothing
        o = origins - (self.center + offset)
        if self.kind == "rect":
            half = self.size / 2.0
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmax > 0)
            t = np.where(tmin > 0, tmin, tmax)  # inside-shape rays exit forward
            return np.where(hit, t, np.inf)
        if self.kind == "disc":
            r = self.size[0]
            b = (o * dirs).sum(axis=1)
            c = (o * o).sum(axis=1) - r * r
            disc = b * b - c
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = -b - sq
            t1 = -b + sq
            t = np.where(t0 > 0, t0, t1)
            return np.where(ok & (t > 0), t, np.inf)
        raise ValueError(f"unknown shape kind {self.kind!r}")


@dataclass
class Part:
    name: str
    shapes: list
    offsets: np.ndarray          # (T, 2) translation per frame
    marker_rest: np.ndarray | None = None  # material marker point at rest

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.marker_rest is not None:
            self.marker_rest = np.asarray(self.marker_rest, dtype=np.float64)

    def to_json(self):
        return {"name": self.name, "shapes": [s.to_json() for s in self.shapes],
                "offsets": self.offsets.tolist(),
                "marker": None if self.marker_rest is None else self.marker_rest.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(d["name"], [Shape.from_json(s) for s in d["shapes"]],
                   d["offsets"], d.get("marker"))


@dataclass
class SceneSpec:
    name: str
    frames: int
    width: int
    parts: list
    static_shapes: list
    camera: dict | list           # camera parameters, static or one per frame
    near: float
    far: float
    background: tuple = (1.0, 1.0, 1.0)
    flow_noise: float = 0.0
    image_noise: float = 0.0

    def __post_init__(self):
        for p in self.parts:
            if p.offsets.shape != (self.frames, 2):
                raise ValueError(f"part {p.name!r} motion script must cover all frames")
        if isinstance(self.camera, list) and len(self.camera) != self.frames:
            raise ValueError("camera trajectory must cover all frames")

    def cam(self, t=0):
        spec = self.camera[t] if isinstance(self.camera, list) else self.camera
        return Camera(o=np.asarray(spec["o"], dtype=np.float64),
                      theta=float(spec["orientation"]),
                      f=float(spec["f"]), c=float(spec["c"]),
                      width=self.width, near=self.near, far=self.far)

    def to_json(self):
        return {"name": self.name, "frames": self.frames, "width": self.width,
                "parts": [p.to_json() for p in self.parts],
                "static_shapes": [s.to_json() for s in self.static_shapes],
                "camera": self.camera, "near": self.near, "far": self.far,
                "background": list(self.background),
                "flow_noise": self.flow_noise, "image_noise": self.image_noise}

    @classmethod
    def from_json(cls, d):
        return cls(d["name"], d["frames"], d["width"],
                   [Part.from_json(p) for p in d["parts"]],
                   [Shape.from_json(s) for s in d["static_shapes"]],
                   d["camera"], d["near"], d["far"],
                   tuple(d.get("background", (1, 1, 1))),
                   d.get("flow_noise", 0.0), d.get("image_noise", 0.0))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


# ------------------------------------------------------------------ ray cast

def _instances(spec, t):
    """(shape, offset, part_id) triples; dynamic parts get ids 1..P."""
    out = []
    for pid, part in enumerate(spec.parts, start=1):
        for s in part.shapes:
            out.append((s, part.offsets[t], pid))
    for s in spec.static_shapes:
        out.append((s, np.zeros(2), 0))
    return out


def cast_rays(spec, t, origins, dirs):
    """First-hit distance / part id / color for arbitrary rays.

    Background (no hit) gets distance far, part id 0, background color.
    Tint shapes darken whatever surface the ray hits inside their region
    (shadow decals) without affecting occupancy or depth.
    """
    r = origins.shape[0]
    best = np.full(r, np.inf)
    pid = np.zeros(r, dtype=np.uint16)
    color = np.tile(np.asarray(spec.background, dtype=np.float64), (r, 1))
    for shape, offset, part_id in _instances(spec, t):
        if shape.kind == "tint":
            continue
        d = shape.ray_hits(origins, dirs, offset)
        closer = d < best
        best = np.where(closer, d, best)
        pid = np.where(closer, np.uint16(part_id), pid)
        color[closer] = shape.color
    hit = np.isfinite(best)
    dist = np.where(hit, best, spec.far)
    if hit.any():
        pts = origins + dist[:, None] * dirs
        for shape, offset, _ in _instances(spec, t):
            if shape.kind != "tint":
                continue
            sel = hit & shape.contains(pts, offset)
            color[sel] = color[sel] * shape.color
    return dist, pid, color, hit


def rasterize(spec, t, cam=None):
    """Exact image/depth/part-id row for frame t."""
    cam = cam or spec.cam(t)
    origins, dirs = cam.pixel_rays()
    dist, pid, color, hit = cast_rays(spec, t, origins, dirs)
    return color, dist, pid


def surface_points(spec, t, cam=None):
    """Per-pixel first-hit world points plus hit mask and part ids."""
    cam = cam or spec.cam(t)
    origins, dirs = cam.pixel_rays()
    dist, pid, _, hit = cast_rays(spec, t, origins, dirs)
    return origins + dist[:, None] * dirs, hit, pid, dist


def exact_flow(spec, t, direction):
    """Per-pixel projected displacement of the seen surface, t -> t+direction.

    Returns (flow (W,), valid (W,)): pixels whose surface point is occluded
    in the target frame are flagged invalid and filled from the nearest
    valid pixel (training-facing files never expose the flag).
    """
    t2 = t + direction
    if not 0 <= t2 < spec.frames:
        raise ValueError(f"flow target frame {t2} out of range")
    cam = spec.cam(t)
    cam2 = spec.cam(t2)
    pts, hit, pid, dist = surface_points(spec, t)
    w = spec.width
    u = np.arange(w, dtype=np.float64)

    moved = pts.copy()
    for part_id, part in enumerate(spec.parts, start=1):
        sel = pid == part_id
        moved[sel] = pts[sel] - part.offsets[t] + part.offsets[t2]
    u2, front = cam2.project(moved)
    flow = np.where(hit, u2 - u, 0.0)

    # visibility in the target frame: the moved point must be front-most
    origins2 = np.broadcast_to(cam2.o, moved.shape).copy()
    d2 = moved - origins2
    n2 = np.linalg.norm(d2, axis=1)
    ok = hit & front & (n2 > 1e-12)
    dirs2 = np.where(n2[:, None] > 1e-12, d2 / np.maximum(n2, 1e-12)[:, None], 0.0)
    cast_d, _, _, _ = cast_rays(spec, t2, origins2, dirs2)
    visible = ok & (np.abs(cast_d - n2) < 1e-9) & cam2.in_image(u2)
    valid = np.where(hit, visible, True)  # empty pixels keep zero flow

    if not valid.all():
        if not valid.any():
            flow[:] = 0.0
        else:
            vi = np.flatnonzero(valid)
            nearest = vi[np.abs(np.arange(w)[:, None] - vi[None, :]).argmin(axis=1)]
            flow = np.where(valid, flow, flow[nearest])
    return flow, valid


def gt_marker(spec, part_index):
    """Rest-pose marker: given explicitly or the centroid-ray surface hit."""
    part = spec.parts[part_index]
    if part.marker_rest is not None:
        return part.marker_rest
    cam = spec.cam(0)
    centroid = part.shapes[0].center + part.offsets[0]
    d = centroid - cam.o
    d = d / np.linalg.norm(d)
    best = np.inf
    for s in part.shapes:
        h = s.ray_hits(cam.o[None, :], d[None, :], part.offsets[0])[0]
        best = min(best, h)
    if not np.isfinite(best):
        raise ValueError(f"part {part.name!r} centroid ray misses the part")
    return cam.o + best * d - part.offsets[0]


def gt_tracks(spec):
    """(world (T, P, 2), pixel (T, P)) ground-truth marker tracks."""
    T, P = spec.frames, len(spec.parts)
    world = np.zeros((T, P, 2))
    pixel = np.zeros((T, P))
    for i, part in enumerate(spec.parts):
        rest = gt_marker(spec, i)
        for t in range(T):
            pos = rest + part.offsets[t]
            world[t, i] = pos
            u, front = spec.cam(t).project(pos)
            if not front:
                raise ValueError(f"marker of part {part.name!r} behind camera at {t}")
            pixel[t, i] = u
    return world, pixel


# ----------------------------------------------------------------- dataset IO

def generate(spec, out_dir, seed=0, png=False):
    """Write the dataset directory; deterministic for a given seed."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    for sub in ("rgb", "flow", "depth", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    world, pixel = gt_tracks(spec) if spec.parts else (np.zeros((spec.frames, 0, 2)),
                                                       np.zeros((spec.frames, 0)))
    meta = {
        "version": 1, "d": 2, "frames": spec.frames, "width": spec.width,
        "channels": 3, "near": spec.near, "far": spec.far,
        "background": list(spec.background),
        "noise": {"flow_sigma": spec.flow_noise, "image_sigma": spec.image_noise},
        "cameras": [spec.cam(t).to_json() for t in range(spec.frames)],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1))

    images = []
    for t in range(spec.frames):
        img, depth, pid = rasterize(spec, t)
        if spec.image_noise > 0:
            img = np.clip(img + rng.normal(0, spec.image_noise, img.shape), 0, 1)
        images.append(img)
        img.astype("<f4").tofile(out / "rgb" / f"{t:05d}.bin")
        depth.astype("<f4").tofile(out / "depth" / f"{t:05d}.bin")
        pid.astype("<u2").tofile(out / "masks" / f"{t:05d}.bin")

    for t in range(spec.frames - 1):
        flow, _ = exact_flow(spec, t, +1)
        if spec.flow_noise > 0:
            flow = flow + rng.normal(0, spec.flow_noise, flow.shape)
        flow.astype("<f4").tofile(out / "flow" / f"{t:05d}_fw.bin")
    for t in range(1, spec.frames):
        flow, _ = exact_flow(spec, t, -1)
        if spec.flow_noise > 0:
            flow = flow + rng.normal(0, spec.flow_noise, flow.shape)
        flow.astype("<f4").tofile(out / "flow" / f"{t:05d}_bw.bin")

    tracks = {"n_keypoints": len(spec.parts),
              "tracks": [{"part": p.name,
                          "world": world[:, i].tolist(),
                          "pixel": pixel[:, i].tolist()}
                         for i, p in enumerate(spec.parts)]}
    (out / "gt_tracks.json").write_text(json.dumps(tracks))
    spec.save(out / "scene_spec.json")

    if png:
        export_png(out, images)
    return out


def export_png(out_dir, images, stripe=24):
    """Optional human-inspection strip (each 1-px row stretched)."""
    from PIL import Image

    d = Path(out_dir) / "png"
    d.mkdir(exist_ok=True)
    for t, img in enumerate(images):
        row = (np.clip(img, 0, 1) * 255).astype(np.uint8)
        strip = np.repeat(row[None, :, :], stripe, axis=0)
        Image.fromarray(strip).save(d / f"{t:05d}.png")


@dataclass
class ValidationReport:
    ok: bool
    issues: list

    def __str__(self):
        head = "OK" if self.ok else "FAIL"
        return "\n".join([head] + [f"  - {s}" for s in self.issues])


def validate(dataset_dir):
    """Structural and consistency checks over a written dataset."""
    from .dataset import Dataset

    issues = []
    root = Path(dataset_dir)
    try:
        ds = Dataset.load(root)
    except Exception as e:  # noqa: BLE001 - report, not crash
        return ValidationReport(False, [f"unreadable dataset: {e}"])

    w = ds.width
    if ds.images.shape != (ds.frames, w, 3):
        issues.append("rgb shape disagrees with meta")
    if ds.depths.shape != (ds.frames, w):
        issues.append("depth shape disagrees with meta")
    if ds.masks.shape != (ds.frames, w):
        issues.append("mask shape disagrees with meta")
    if np.any(ds.images < 0) or np.any(ds.images > 1):
        issues.append("image values outside [0, 1]")
    for t in range(ds.frames - 1):
        if ds.flow_fw(t).shape != (w,):
            issues.append(f"flow {t:05d}_fw wrong length")
    for t in range(1, ds.frames):
        if ds.flow_bw(t).shape != (w,):
            issues.append(f"flow {t:05d}_bw wrong length")

    flow_tol = 1e-6 + 6.0 * ds.flow_sigma
    depth_tol = 1e-3 + 6.0 * ds.flow_sigma * 0  # depth files carry no noise
    if ds.gt_world is not None and ds.gt_world.shape[1] > 0:
        for i in range(ds.gt_world.shape[1]):
            for t in range(ds.frames):
                u, front = ds.cams[t].project(ds.gt_world[t, i])
                if not front:
                    issues.append(f"track {i} behind camera at frame {t}")
                    continue
                if abs(u - ds.gt_pixel[t, i]) > 1e-9:
                    issues.append(f"track {i} pixel/world mismatch at frame {t}")
                    break
            for t in range(ds.frames - 1):
                f = np.interp(ds.gt_pixel[t, i], np.arange(w), ds.flow_fw(t))
                step = ds.gt_pixel[t + 1, i] - ds.gt_pixel[t, i]
                if abs(f - step) > flow_tol:
                    issues.append(
                        f"track {i} inconsistent with forward flow at frame {t} "
                        f"(|{f:.4g} - {step:.4g}| > {flow_tol:.3g})")
                    break
            for t in range(ds.frames):
                d = np.interp(ds.gt_pixel[t, i], np.arange(w), ds.depths[t])
                want = ds.cams[t].distance(ds.gt_world[t, i])
                if abs(d - want) > 1e-3:
                    issues.append(f"track {i} depth mismatch at frame {t}")
                    break
    return ValidationReport(not issues, issues)


# ------------------------------------------------------------------ fixtures

def _episode(frames, start, end, amplitude):
    """Smooth press profile: 0 outside [start, end], peak at the middle."""
    t = np.arange(frames, dtype=np.float64)
    x = (t - start) / max(end - start, 1)
    ramp = np.sin(np.pi * np.clip(x, 0.0, 1.0)) ** 2
    return amplitude * ramp


_GRAY = (0.84, 0.84, 0.82)
_TABLE = (0.70, 0.64, 0.58)


def _standard_camera(width):
    return {"o": [0.0, -1.8], "orientation": 0.0,
            "f": 125.0 * width / 96.0, "c": (width - 1) / 2.0}


def _sliding_camera(width, frames, amplitude=0.3):
    """Lateral dolly: translation-only so per-part pixel flow stays affine,
    while the parallax pins surface depths for the trained field.  Cosine
    phase keeps the dolly decorrelated from the sine-profile part motions.
    """
    base = _standard_camera(width)
    ph = 2.0 * np.pi * np.arange(frames) / frames
    return [{**base, "o": [float(amplitude * np.cos(p)), base["o"][1]]}
            for p in ph]


def piano2_spec(frames=64, width=96, flow_noise=0.0, image_noise=0.0,
                dolly=0.3):
    """Two pressable keys with moving contact shadows, separate episodes."""
    def key(cx, color, press):
        body = Shape("rect", (cx, 0.10), (0.16, 0.30), color)
        # paired contact-shadow decals on the keyboard face flanking the
        # key; symmetric about the key center and at the key's own depth,
        # they slide off the face as the key presses in
        shade = (0.55, 0.55, 0.58)
        shadow_l = Shape("tint", (cx - 0.12, -0.035), (0.10, 0.07), shade)
        shadow_r = Shape("tint", (cx + 0.12, -0.035), (0.10, 0.07), shade)
        offsets = np.stack([np.zeros(frames), press], axis=1)
        return Part(f"key_{cx:+.2f}", [body, shadow_l, shadow_r], offsets,
                    marker_rest=np.array([cx, -0.05]))

    press1 = _episode(frames, int(frames * 0.09), int(frames * 0.42), 0.18)
    press2 = _episode(frames, int(frames * 0.58), int(frames * 0.91), 0.18)
    parts = [key(-0.30, (0.85, 0.22, 0.20), press1),
             key(0.30, (0.20, 0.32, 0.85), press2)]
    # keyboard body: a textured face plane at the keys' depth with
    # apertures for the two keys (plus a backdrop visible at the edges)
    static = [
        Shape("rect", (0.0, 0.875), (2.0, 0.15), _GRAY),         # backdrop
        Shape("rect", (0.0, 0.425), (1.7, 0.15), _TABLE),        # behind keys
        Shape("rect", (-0.59, 0.10), (0.42, 0.30), (0.74, 0.71, 0.66)),
        Shape("rect", (0.0, 0.10), (0.44, 0.30), (0.66, 0.63, 0.58)),
        Shape("rect", (0.59, 0.10), (0.42, 0.30), (0.74, 0.71, 0.66)),
    ]
    cam = (_sliding_camera(width, frames, dolly) if dolly
           else _standard_camera(width))
    return SceneSpec("piano-2", frames, width, parts, static,
                     cam, near=1.2, far=3.0,
                     background=(0.97, 0.97, 0.99),
                     flow_noise=flow_noise, image_noise=image_noise)


def slider1_spec(frames=48, width=96, flow_noise=0.0, image_noise=0.0):
    """One block translating along a 2-D loop (multi-dimensional editing)."""
    t = np.arange(frames, dtype=np.float64)
    ph = 2 * np.pi * t / frames
    offsets = np.stack([0.28 * np.sin(ph), 0.10 * (1 - np.cos(ph))], axis=1)
    body = Shape("rect", (0.0, 0.05), (0.22, 0.22), (0.20, 0.55, 0.80))
    part = Part("slider", [body], offsets, marker_rest=np.array([0.0, -0.06]))
    static = [
        Shape("rect", (0.0, 0.875), (2.0, 0.15), _GRAY),
        Shape("rect", (-0.58, 0.10), (0.14, 0.30), (0.75, 0.35, 0.30)),
        Shape("rect", (0.58, 0.10), (0.14, 0.30), (0.35, 0.65, 0.35)),
    ]
    return SceneSpec("slider-1", frames, width, [part], static,
                     _sliding_camera(width, frames), near=1.2, far=3.0,
                     background=(0.97, 0.97, 0.99),
                     flow_noise=flow_noise, image_noise=image_noise)


def dicecups3_spec(frames=72, width=96, flow_noise=0.0, image_noise=0.0):
    """Three cups lifting in independent episodes (novel recombination)."""
    colors = [(0.80, 0.30, 0.25), (0.30, 0.60, 0.30), (0.30, 0.35, 0.80)]
    lanes = [-0.40, 0.0, 0.40]
    windows = [(0.06, 0.31), (0.38, 0.63), (0.69, 0.94)]
    parts = []
    for cx, col, (a, b) in zip(lanes, colors, windows):
        lift = _episode(frames, int(frames * a), int(frames * b), 0.17)
        body = Shape("rect", (cx, 0.12), (0.18, 0.26), col)
        offsets = np.stack([np.zeros(frames), -lift], axis=1)  # lift toward camera
        parts.append(Part(f"cup_{cx:+.2f}", [body], offsets,
                          marker_rest=np.array([cx, -0.01])))
    static = [
        Shape("rect", (0.0, 0.875), (2.0, 0.15), _GRAY),
        Shape("rect", (0.0, 0.38), (1.6, 0.14), _TABLE),
    ]
    return SceneSpec("dice-cups-3", frames, width, parts, static,
                     _sliding_camera(width, frames, amplitude=0.18),
                     near=1.2, far=3.0,
                     background=(0.97, 0.97, 0.99),
                     flow_noise=flow_noise, image_noise=image_noise)


def occlusion_spec(frames=16, width=96):
    """A target hidden behind a screen until the screen slides away at ~t=7."""
    slide = np.zeros((frames, 2))
    slide[:, 0] = np.concatenate([np.zeros(7), 0.45 * np.arange(1, frames - 6) / 4.0])
    screen = Part("screen", [Shape("rect", (0.0, -0.25), (0.5, 0.12),
                                   (0.55, 0.55, 0.58))], slide)
    target = Part("target", [Shape("rect", (0.0, 0.10), (0.2, 0.2),
                                   (0.85, 0.45, 0.20))], np.zeros((frames, 2)),
                  marker_rest=np.array([0.0, 0.0]))
    static = [Shape("rect", (0.0, 0.875), (2.0, 0.15), _GRAY)]
    return SceneSpec("occlusion", frames, width, [target, screen], static,
                     _standard_camera(width), near=1.2, far=3.0,
                     background=(0.97, 0.97, 0.99))


FIXTURES = {"piano-2": piano2_spec, "slider-1": slider1_spec,
            "dice-cups-3": dicecups3_spec, "occlusion": occlusion_spec}
