"""Benchmark the compiled kernels against the NumPy fallback.

Runs the individual hot kernels and one representative training step at
a few batch sizes, printing per-call times for both backends.

    python benchmarks/bench_kernels.py [--steps 30]
"""

import argparse
import os
import time

import numpy as np


def time_call(fn, reps):
    fn()  # warmup
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def bench_kernels(reps=200):
    from kpfield.backend import available_backends, get_kernels

    r = np.random.default_rng(0)
    b, k, n = 4096, 36, 64
    x = r.standard_normal((b, k))
    w = r.standard_normal((k, n))
    bias = r.standard_normal(n)
    gy = r.standard_normal((b, n))
    enc_in = r.uniform(-1, 1, (b, 2))
    bw = np.ones(6)
    genc = r.standard_normal((b, 26))
    sd = r.uniform(0, 0.1, (512, 64))
    wkp = r.uniform(0, 1, (512, 8))
    kkp = r.standard_normal((512, 8, 2))
    gkp = r.standard_normal((512, 2))

    cases = {
        "affine_fwd (4096x36x64)": lambda K: K.affine_fwd(x, w, bias),
        "affine_bwd": lambda K: K.affine_bwd(x, w, gy),
        "relu_fwd": lambda K: K.relu_fwd(gy),
        "posenc_fwd L=6": lambda K: K.posenc_fwd(enc_in, 6, True, bw),
        "posenc_bwd L=6": lambda K: K.posenc_bwd(enc_in, 6, True, bw, genc),
        "softmax_fwd (4096x8)": lambda K: K.softmax_fwd(
            np.ascontiguousarray(x[:, :8])),
        "cumsum_excl (512x64)": lambda K: K.cumsum_excl_fwd(sd),
        "kpmix_fwd (512x8x2)": lambda K: K.kpmix_fwd(wkp, kkp),
        "kpmix_bwd": lambda K: K.kpmix_bwd(wkp, kkp, gkp),
    }
    backends = available_backends()
    print(f"{'kernel':32s}" + "".join(f"{b:>12s}" for b in backends))
    for name, fn in cases.items():
        row = f"{name:32s}"
        for bk in backends:
            K = get_kernels(bk)
            dt = time_call(lambda: fn(K), reps)
            row += f"{dt * 1e6:10.1f}us"
        print(row)


def bench_train_step(steps=30, rays=128, samples=24, scale=0.5):
    """One full stage-2 step (render + losses + backward + update)."""
    import tempfile

    from kpfield.dataset import Dataset
    from kpfield.fields import ModelConfig
    from kpfield.synth import generate, piano2_spec
    from kpfield.train import (TrainConfig, init_keypoints_from_tracks,
                               model_for_dataset, stage1_maps, train_stage2)

    with tempfile.TemporaryDirectory() as tmp:
        ds = Dataset.load(generate(piano2_spec(frames=16), tmp + "/ds"))
        mcfg = ModelConfig().scaled(scale)
        cfg = TrainConfig(stage1_steps=0, stage2_steps=steps, rays_per_batch=rays,
                          samples_per_ray=samples, surface_refresh=0,
                          probe_every=0, log_every=10 ** 9, depth_samples=16)
        model = model_for_dataset(ds, n_keypoints=2, model_cfg=mcfg)
        init_keypoints_from_tracks(model, ds.gt_world, np.zeros(2, np.int64))
        maps = stage1_maps(model, ds, cfg)
        t0 = time.perf_counter()
        train_stage2(ds, model, maps, cfg)
        dt = (time.perf_counter() - t0) / steps
        print(f"stage-2 step  rays={rays} samples={samples} scale={scale}: "
              f"{dt * 1e3:.1f} ms/step")
        return dt


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=30)
    args = ap.parse_args()
    from kpfield.backend import BACKEND

    print(f"active backend: {BACKEND}")
    bench_kernels()
    print()
    for rays, samples, scale in [(128, 24, 0.5), (128, 32, 0.5), (256, 32, 0.5),
                                 (512, 64, 1.0)]:
        bench_train_step(args.steps, rays, samples, scale)
    print()
    print("fallback comparison (KPFIELD_BACKEND=numpy):")
    os.environ["KPFIELD_BACKEND"] = "numpy"
