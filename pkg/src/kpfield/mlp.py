"""Small fully connected stacks stored as named ParamStore blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError
from .params import ParamStore, he_init


@dataclass
class MLPSpec:
    """Layer sizes include input and output: sizes=[in, h1, ..., out].

    skips lists hidden-layer indices whose input gets the network input
    re-concatenated (NeRF-style skip).  The final layer is linear; hidden
    layers use the named activation.
    """

    name: str
    sizes: tuple
    skips: tuple = ()
    activation: str = "relu"
    zero_init_last: bool = False

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def layer_dims(self):
        dims = []
        for i in range(self.n_layers):
            fan_in = self.sizes[i]
            if i in self.skips:
                fan_in += self.sizes[0]
            dims.append((fan_in, self.sizes[i + 1]))
        return dims

    def build(self, store: ParamStore, rng: np.random.Generator):
        for i, (fan_in, fan_out) in enumerate(self.layer_dims()):
            last = i == self.n_layers - 1
            if last and self.zero_init_last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = he_init(rng, fan_in, fan_out)
            store.add(f"{self.name}.w{i}", w)
            store.add(f"{self.name}.b{i}", np.zeros(fan_out))

    def param_names(self):
        out = []
        for i in range(self.n_layers):
            out += [f"{self.name}.w{i}", f"{self.name}.b{i}"]
        return out


_ACTIVATIONS = {"relu": ad.relu, "none": lambda v: v}


def mlp_forward(x, spec: MLPSpec, store: ParamStore, tape=None):
    """Run the stack on x (B, sizes[0]); records when a tape is active."""
    tape = tape or ad.active_tape()
    fuse_relu = spec.activation == "relu"
    act = _ACTIVATIONS[spec.activation]
    h = x
    for i in range(spec.n_layers):
        if i in spec.skips:
            h = ad.concat([h, x], axis=1)
        if tape is not None:
            w = tape.param(store, f"{spec.name}.w{i}")
            b = tape.param(store, f"{spec.name}.b{i}")
        else:
            w = ad.const(store.get(f"{spec.name}.w{i}"))
            b = ad.const(store.get(f"{spec.name}.b{i}"))
        hidden = i < spec.n_layers - 1
        try:
            if hidden and fuse_relu:
                h = ad.affine_relu(h, w, b)
            else:
                h = ad.affine(h, w, b)
        except ShapeError as e:
            raise ShapeError(f"{spec.name} layer {i}: {e}") from None
        if hidden and not fuse_relu:
            h = act(h)
    return h
