"""Named parameter blocks with gradients.

Every learned quantity in the scene model (layer weights, latent tables,
key-point positions) lives in one ParamStore as a flat float64 array with
shape metadata.  Gradients are accumulated here by the tape's backward
pass; the optimizer updates trainable blocks in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Block:
    data: np.ndarray
    grad: np.ndarray
    trainable: bool = True
    lr_scale: float = 1.0


class ParamStore:
    """Dictionary of uniquely named parameter blocks."""

    def __init__(self):
        self._blocks: dict[str, Block] = {}

    def add(self, name, value, trainable=True, lr_scale=1.0):
        if name in self._blocks:
            raise ValueError(f"duplicate parameter block {name!r}")
        data = np.ascontiguousarray(value, dtype=np.float64)
        blk = Block(data=data, grad=np.zeros_like(data), trainable=trainable,
                    lr_scale=lr_scale)
        self._blocks[name] = blk
        return blk

    def __contains__(self, name):
        return name in self._blocks

    def __getitem__(self, name) -> Block:
        return self._blocks[name]

    def get(self, name):
        return self._blocks[name].data

    def set(self, name, value):
        blk = self._blocks[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != blk.data.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {value.shape} vs {blk.data.shape}")
        blk.data[...] = value

    def names(self):
        return list(self._blocks)

    def items(self):
        return self._blocks.items()

    def zero_grads(self):
        for blk in self._blocks.values():
            blk.grad[...] = 0.0

    def n_params(self):
        return sum(b.data.size for b in self._blocks.values())

    def state_arrays(self):
        """Ordered (name, data) pairs; order is insertion order."""
        return [(name, blk.data) for name, blk in self._blocks.items()]


def he_init(rng, fan_in, fan_out):
    """Scaled-normal init for relu stacks."""
    std = np.sqrt(2.0 / fan_in)
    return rng.standard_normal((fan_in, fan_out)) * std
