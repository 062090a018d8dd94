"""Desk-scale defaults used by the CLI and the acceptance fixtures.

Sized for commodity CPUs: small dense stacks and modest ray batches keep
a full two-stage run inside a coffee-break budget while the flatland
fixtures still train past 30 dB.
"""

from .fields import ModelConfig
from .train import TrainConfig


def desk_model_config(**overrides):
    base = dict(
        warp_hidden=(32, 32),
        weight_hidden=(32, 32),
        trunk_hidden=(48, 48, 48),
        trunk_skip=1,
        color_hidden=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


def desk_train_config(**overrides):
    base = dict(
        stage1_steps=20_000,
        stage2_steps=30_000,
        rays_per_batch=96,
        samples_per_ray=20,
        surface_refresh=500,
        surface_pool=256,
        depth_samples=128,
        log_every=200,
        probe_every=4000,
    )
    base.update(overrides)
    return TrainConfig(**base)
