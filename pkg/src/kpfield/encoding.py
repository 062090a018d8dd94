"""Frequency (positional) encoding with optional coarse-to-fine window."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class PositionalEncoder:
    """gamma(x) = [x, sin(2^0 pi x), cos(2^0 pi x), ..., cos(2^(L-1) pi x)].

    window: None disables annealing; a value in [0, L] weights band j by
    the usual cosine-easing ramp of (window - j) clipped to [0, 1], so the
    encoding sweeps from identity-only to all bands as the window opens.
    """

    nbands: int
    include_identity: bool = True
    window: float | None = None

    def out_dim(self, d):
        return d * ((1 if self.include_identity else 0) + 2 * self.nbands)

    def band_weights(self):
        if self.window is None:
            return np.ones(self.nbands)
        j = np.arange(self.nbands, dtype=np.float64)
        x = np.clip(self.window - j, 0.0, 1.0)
        return 0.5 * (1.0 - np.cos(np.pi * x))

    def encode(self, x):
        """Encode a Var or array of shape (B, d)."""
        v = x if isinstance(x, ad.Var) else ad.const(x)
        return ad.posenc(v, self.nbands, self.include_identity, self.band_weights())

    def encode_array(self, x):
        return self.encode(np.atleast_2d(x)).data
