"""Flatland pinhole cameras: a 2-D world imaged onto a 1-D pixel row.

Convention: orientation theta=0 looks along +y, the lateral axis is +x;
pixel coordinate u is continuous with integer values at pixel centers,
u = f * (lateral / forward) + c.  Depth is Euclidean ray distance from
the camera origin, matching the geometry loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class Camera:
    o: np.ndarray
    theta: float
    f: float
    c: float
    width: int
    near: float
    far: float

    def __post_init__(self):
        self.o = np.asarray(self.o, dtype=np.float64)
        if self.f <= 0:
            raise ValueError("focal length must be positive")
        if not self.near < self.far:
            raise ValueError("near must be < far")

    @property
    def forward(self):
        return np.array([-np.sin(self.theta), np.cos(self.theta)])

    @property
    def lateral(self):
        return np.array([np.cos(self.theta), np.sin(self.theta)])

    def to_json(self):
        return {"o": self.o.tolist(), "orientation": self.theta, "f": self.f,
                "c": self.c}

    def project(self, x):
        """Pixel coordinates and in-front flags for points x (..., 2)."""
        x = np.asarray(x, dtype=np.float64)
        rel = x - self.o
        z = rel @ self.forward
        lat = rel @ self.lateral
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.f * (lat / z) + self.c
        return u, z > 0.0

    def distance(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.linalg.norm(x - self.o, axis=-1)

    def ray_dirs(self, u):
        """Unit world ray directions for pixel coordinates u (...,)."""
        u = np.asarray(u, dtype=np.float64)
        dx = (u - self.c) / self.f
        d = dx[..., None] * self.lateral + self.forward
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def unproject(self, u, dist):
        """World point at ray distance dist along the pixel-u ray."""
        return self.o + np.asarray(dist)[..., None] * self.ray_dirs(u)

    def pixel_rays(self):
        """(origins (W,2), unit dirs (W,2)) for all pixel centers."""
        u = np.arange(self.width, dtype=np.float64)
        dirs = self.ray_dirs(u)
        return np.broadcast_to(self.o, dirs.shape).copy(), dirs

    def in_image(self, u):
        u = np.asarray(u)
        return (u >= 0.0) & (u <= self.width - 1.0)

    # ------------------------------------------------------ differentiable

    def project_var(self, k):
        """Tape-recorded projection of k (B,2) -> pixel coords (B,)."""
        b = k.data.shape[0]
        rel = ad.sub(k, ad.const(np.broadcast_to(self.o, (b, 2)).copy()))
        z = ad.matmul(rel, ad.const(self.forward[:, None]))
        lat = ad.matmul(rel, ad.const(self.lateral[:, None]))
        u = ad.add(ad.scale(ad.div(lat, z), self.f),
                   ad.const(np.full((b, 1), self.c)))
        return ad.reshape(u, (b,))

    def distance_var(self, k):
        """Tape-recorded Euclidean distance of k (B,2) from the origin."""
        b = k.data.shape[0]
        rel = ad.sub(k, ad.const(np.broadcast_to(self.o, (b, 2)).copy()))
        return ad.sqrt(ad.sqnorm(rel, axis=1))


def camera_from_json(d, width, near, far):
    return Camera(o=np.asarray(d["o"], dtype=np.float64), theta=float(d["orientation"]),
                  f=float(d["f"]), c=float(d["c"]), width=width, near=near, far=far)
