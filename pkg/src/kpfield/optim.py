"""Adaptive-moment gradient descent with an exponentially decayed rate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamStore


class NonFiniteGradient(RuntimeError):
    def __init__(self, block):
        super().__init__(f"non-finite gradient in block {block!r}")
        self.block = block


@dataclass
class LrSchedule:
    """rate(step) = base * decay_factor ** (step / decay_interval)."""

    base: float = 1e-3
    decay_factor: float = 0.1
    decay_interval: int = 50_000

    def rate(self, step):
        return self.base * self.decay_factor ** (step / self.decay_interval)


class Adam:
    """Bias-corrected first/second-moment updates on trainable blocks."""

    def __init__(self, store: ParamStore, schedule: LrSchedule | None = None,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.schedule = schedule or LrSchedule()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(b.data) for name, b in store.items()}
        self.v = {name: np.zeros_like(b.data) for name, b in store.items()}

    def step(self):
        """Apply one update from the grads currently held in the store."""
        self.step_count += 1
        t = self.step_count
        lr = self.schedule.rate(t)
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, blk in self.store.items():
            if not blk.trainable:
                continue
            g = blk.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            blk.data -= (lr * blk.lr_scale) * mhat / (np.sqrt(vhat) + self.eps)
        return lr
