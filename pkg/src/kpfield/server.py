"""HTTP service exposing a trained model to the interactive editor.

JSON request/response bodies; image and density payloads are base64 of
little-endian float64 arrays so a service render is bitwise identical to
the same render made through the CLI.  Render work is serialized on one
lock, so requests are answered in arrival order.
"""

from __future__ import annotations

import base64
import json
import threading
import traceback
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from .cameras import Camera
from .checkpoint import cameras_from_meta, load_checkpoint
from .editing import default_depth, extrapolation_warning, render_trail
from .render import RenderConfig, render_density_map, render_image
from .train import blas_limit


class RequestError(ValueError):
    pass


def _b64(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()


class ModelService:
    """Request handlers over one loaded model; thread-safe via a render lock."""

    def __init__(self, model, header, density_res=96, samples=64):
        meta = header.get("dataset_meta")
        if not meta:
            raise ValueError("checkpoint lacks dataset metadata; cannot serve")
        self.model = model
        self.header = header
        self.meta = meta
        self.cams = cameras_from_meta(meta)
        self.width = meta["width"]
        self.background = tuple(meta["background"])
        self.density_res = density_res
        self.samples = samples
        self.lock = threading.Lock()
        self.default_base = int(model.keypoints.t_ref[0]) if model.cfg.n_keypoints else 0

    # ------------------------------------------------------------- helpers

    def _camera(self, spec):
        if spec is None:
            return self.cams[self.default_base]
        if isinstance(spec, dict) and "preset" in spec:
            idx = int(spec["preset"])
            if not 0 <= idx < len(self.cams):
                raise RequestError(f"camera preset {idx} out of range")
            return self.cams[idx]
        if isinstance(spec, dict):
            base = self.cams[self.default_base]
            return Camera(
                o=np.asarray(spec.get("o", base.o), dtype=np.float64),
                theta=float(spec.get("orientation", base.theta)),
                f=float(spec.get("f", base.f)),
                c=float(spec.get("c", base.c)),
                width=self.width, near=self.meta["near"], far=self.meta["far"])
        raise RequestError("camera must be a preset or a parameter object")

    def _keypoints(self, body):
        k = body.get("keypoints")
        if k is None:
            raise RequestError("missing keypoints")
        arr = np.asarray(k, dtype=np.float64)
        want = (self.model.cfg.n_keypoints, self.model.cfg.d)
        if arr.shape != want:
            raise RequestError(f"keypoints must have shape {want}, got {arr.shape}")
        return arr

    def _base_frame(self, body):
        t = int(body.get("base_frame", self.default_base))
        if not 0 <= t < self.model.cfg.n_frames:
            raise RequestError(f"base_frame {t} out of range")
        return t

    # ------------------------------------------------------------ endpoints

    def state(self):
        kp = self.model.keypoint_positions()
        return {
            "d": self.model.cfg.d,
            "n_keypoints": self.model.cfg.n_keypoints,
            "frames": self.model.cfg.n_frames,
            "width": self.width,
            "near": self.meta["near"],
            "far": self.meta["far"],
            "background": list(self.background),
            "bounds_lo": list(self.model.cfg.bounds_lo),
            "bounds_hi": list(self.model.cfg.bounds_hi),
            "t_ref": self.model.keypoints.t_ref.tolist(),
            "base_frame": self.default_base,
            "camera_presets": self.meta["cameras"],
            "keypoints": kp[self.default_base].tolist(),
            "density_res": self.density_res,
        }

    def keypoints(self, frame):
        if not 0 <= frame < self.model.cfg.n_frames:
            raise RequestError(f"frame {frame} out of range")
        return {"frame": frame,
                "keypoints": self.model.keypoint_positions()[frame].tolist()}

    def render(self, body):
        cam = self._camera(body.get("camera"))
        k = self._keypoints(body)
        t = self._base_frame(body)
        seed = int(body.get("seed", 0))
        samples = int(body.get("samples", self.samples))
        cfg = RenderConfig(n_samples=samples, background=self.background)
        with self.lock, blas_limit():
            out = render_image(self.model, cam, t, cfg, stage=2, k_override=k,
                               seed=seed)
            dens, _, _ = render_density_map(self.model, self.density_res, t=t,
                                            k_override=k)
        return {
            "width": self.width,
            "image_b64": _b64(out.color),
            "depth_b64": _b64(out.depth),
            "opacity_b64": _b64(out.opacity),
            "density_b64": _b64(dens),
            "density_res": self.density_res,
            "warning_extrapolation": extrapolation_warning(self.model, k),
        }

    def depth_default(self, body):
        cam = self._camera(body.get("camera"))
        if "pixel" not in body:
            raise RequestError("missing pixel")
        with self.lock:
            d = default_depth(self.model, cam, float(body["pixel"]),
                              k=int(body.get("k", 4)))
        return {"depth": d}

    def video(self, body):
        trail = body.get("trail")
        if not isinstance(trail, list) or len(trail) < 2:
            raise RequestError("trail must list at least two timed configurations")
        times = [float(c.get("time", i)) for i, c in enumerate(trail)]
        configs = [self._keypoints(c) for c in trail]
        n_frames = int(body.get("n_frames", 8))
        cam = self._camera(body.get("camera"))
        t = self._base_frame(body)
        seed = int(body.get("seed", 0))
        cfg = RenderConfig(n_samples=int(body.get("samples", self.samples)),
                           background=self.background)
        with self.lock, blas_limit():
            outs = render_trail(self.model, cam, times, configs, n_frames,
                                base_frame=t, cfg=cfg, seed=seed)
        return {"width": self.width,
                "frames": [_b64(o.color) for o in outs]}


class _Handler(BaseHTTPRequestHandler):
    service: ModelService = None

    def log_message(self, *args):  # quiet by default
        pass

    def _reply(self, code, payload):
        body = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.end_headers()

    def do_GET(self):
        url = urlparse(self.path)
        try:
            if url.path == "/state":
                return self._reply(200, self.service.state())
            if url.path == "/keypoints":
                qs = parse_qs(url.query)
                frame = int(qs.get("frame", ["0"])[0])
                return self._reply(200, self.service.keypoints(frame))
            return self._reply(404, {"error": f"unknown path {url.path}"})
        except RequestError as e:
            return self._reply(400, {"error": str(e)})
        except Exception as e:  # noqa: BLE001
            return self._reply(500, {"error": str(e),
                                     "traceback": traceback.format_exc()})

    def do_POST(self):
        url = urlparse(self.path)
        try:
            length = int(self.headers.get("Content-Length", "0"))
            try:
                body = json.loads(self.rfile.read(length) or b"{}")
            except json.JSONDecodeError as e:
                return self._reply(400, {"error": f"malformed JSON: {e}"})
            if url.path == "/render":
                return self._reply(200, self.service.render(body))
            if url.path == "/default_depth":
                return self._reply(200, self.service.depth_default(body))
            if url.path == "/video":
                return self._reply(200, self.service.video(body))
            return self._reply(404, {"error": f"unknown path {url.path}"})
        except RequestError as e:
            return self._reply(400, {"error": str(e)})
        except Exception as e:  # noqa: BLE001
            return self._reply(500, {"error": str(e),
                                     "traceback": traceback.format_exc()})


def make_server(ckpt_path, port, host="127.0.0.1", density_res=96, samples=64):
    """Build a ThreadingHTTPServer around a checkpoint (caller runs it)."""
    model, header = load_checkpoint(ckpt_path)
    service = ModelService(model, header, density_res=density_res, samples=samples)
    handler = type("BoundHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.service = service
    return server
