"""Command-line entry point: dataset generation through serving."""

from __future__ import annotations

import argparse
import base64
import json
import sys
from pathlib import Path

import numpy as np


def _load_dataset(path):
    from .dataset import Dataset

    return Dataset.load(path)


def cmd_synth(args):
    from .synth import FIXTURES, SceneSpec, generate

    if args.spec in FIXTURES:
        spec = FIXTURES[args.spec](flow_noise=args.flow_noise,
                                   image_noise=args.image_noise)
    else:
        spec = SceneSpec.load(args.spec)
        if args.flow_noise:
            spec.flow_noise = args.flow_noise
        if args.image_noise:
            spec.image_noise = args.image_noise
    generate(spec, args.out, seed=args.seed, png=args.png)
    print(f"wrote dataset {spec.name!r} to {args.out}")
    return 0


def cmd_validate(args):
    from .synth import validate

    report = validate(args.dir)
    print(report)
    return 0 if report.ok else 1


def _preset_cfgs(args, dataset):
    from .presets import desk_model_config, desk_train_config

    cfg = desk_train_config(seed=args.seed)
    if args.stage1_steps is not None:
        cfg.stage1_steps = args.stage1_steps
    if args.stage2_steps is not None:
        cfg.stage2_steps = args.stage2_steps
    if args.anneal_warp:
        cfg.anneal_warp = True
    return desk_model_config(), cfg


def cmd_train_stage1(args):
    from .checkpoint import dataset_meta_for, save_checkpoint
    from .train import MetricsLog, train_stage1

    ds = _load_dataset(args.dir)
    mcfg, cfg = _preset_cfgs(args, ds)
    log = MetricsLog(args.metrics)
    model, _ = train_stage1(ds, cfg, model_cfg=mcfg, log=log)
    save_checkpoint(args.ckpt, model, dataset_meta=dataset_meta_for(ds),
                    train_cfg=cfg.to_json())
    print(f"stage-1 checkpoint written to {args.ckpt}")
    return 0


def cmd_analyze(args):
    from .checkpoint import load_checkpoint
    from .kpanalysis import AnalysisConfig, analyze_scene, save_tracks
    from .train import blas_limit

    ds = _load_dataset(args.dir)
    model, _ = load_checkpoint(args.ckpt)
    cfg = AnalysisConfig(grid_res=args.grid_res,
                         use_skipping=not args.no_skipping)
    with blas_limit():
        grid, refs, tracks = analyze_scene(ds, model, cfg)
    save_tracks(args.tracks, tracks)
    print(f"detected {len(refs)} key point(s):")
    for ref, tr in zip(refs, tracks):
        print(f"  at {np.round(ref.position, 4).tolist()} score {ref.score:.3e}"
              f" t_ref={tr.t_ref}")
    print(f"tracks written to {args.tracks}")
    return 0


def cmd_train(args):
    from .checkpoint import dataset_meta_for, load_checkpoint, save_checkpoint
    from .fields import ModelConfig
    from .kpanalysis import load_tracks
    from .train import (MetricsLog, init_keypoints_from_tracks, stage1_maps,
                        train_stage2)

    ds = _load_dataset(args.dir)
    stage1_model, header = load_checkpoint(args.ckpt1)
    tracks = load_tracks(args.tracks)
    if not tracks:
        print("no tracks to train with", file=sys.stderr)
        return 1
    _, cfg = _preset_cfgs(args, ds)

    # same architecture, re-dimensioned for the detected key-point count
    mc = ModelConfig.from_json(header["model"])
    mc.n_keypoints = len(tracks)
    from .fields import SceneModel

    model = SceneModel(mc, seed=cfg.seed)
    for name, blk in stage1_model.store.items():
        if name in model.store and name != "keypoints":
            if model.store.get(name).shape == blk.data.shape:
                model.store.set(name, blk.data)
    world = np.stack([tr.world for tr in tracks], axis=1)
    init_keypoints_from_tracks(model, world,
                               np.array([tr.t_ref for tr in tracks]))
    maps = stage1_maps(model, ds, cfg)
    log = MetricsLog(args.metrics)
    train_stage2(ds, model, maps, cfg, log=log)
    save_checkpoint(args.ckpt2, model, dataset_meta=header.get("dataset_meta"),
                    train_cfg=cfg.to_json())
    print(f"stage-2 checkpoint written to {args.ckpt2}")
    return 0


def cmd_render(args):
    from .checkpoint import cameras_from_meta, load_checkpoint
    from .render import RenderConfig, render_image
    from .train import blas_limit

    model, header = load_checkpoint(args.ckpt)
    meta = header["dataset_meta"]
    cams = cameras_from_meta(meta)
    cam = cams[args.camera if args.camera is not None else args.frame]
    k_override = None
    if args.keypoints:
        k_override = np.asarray(json.loads(Path(args.keypoints).read_text())
                                if Path(args.keypoints).exists()
                                else json.loads(args.keypoints), dtype=np.float64)
    cfg = RenderConfig(n_samples=args.samples,
                       background=tuple(meta["background"]))
    with blas_limit():
        out = render_image(model, cam, args.frame, cfg, stage=args.stage,
                           k_override=k_override, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(out.color, dtype="<f8").tofile(args.out)
    print(f"wrote {out.color.shape[0]}x3 float64 image to {args.out} "
          f"(psnr target range [0,1])")
    if args.png:
        from .synth import export_png

        export_png(Path(args.out).parent, [out.color], stripe=24)
    return 0


def cmd_eval(args):
    from .checkpoint import cameras_from_meta, load_checkpoint
    from .render import RenderConfig, psnr, render_image
    from .train import blas_limit

    model, header = load_checkpoint(args.ckpt)
    ds = _load_dataset(args.dir)
    cfg = RenderConfig(n_samples=args.samples, background=tuple(ds.background))
    stride = max(1, args.frame_stride)
    scores = []
    with blas_limit():
        for t in range(0, ds.frames, stride):
            out = render_image(model, ds.cams[t], t, cfg, stage=args.stage,
                               seed=0)
            scores.append((t, psnr(out.color, ds.images[t])))
    print("frame  psnr_db")
    for t, s in scores:
        print(f"{t:5d}  {s:7.2f}")
    mean_psnr = float(np.mean([s for _, s in scores]))
    print(f"mean   {mean_psnr:7.2f}")

    report = {"mean_psnr": mean_psnr,
              "frames": [{"frame": t, "psnr": s} for t, s in scores]}
    if ds.gt_world is not None and model.cfg.n_keypoints and args.stage == 2:
        kp = model.keypoint_positions()
        err = track_pixel_errors(ds, kp)
        if err is not None:
            print("track  mean_px  p90_px  frac_within_2px")
            for i in range(err.shape[1]):
                e = err[:, i]
                print(f"{i:5d}  {e.mean():7.3f}  {np.percentile(e, 90):6.3f}"
                      f"  {float((e <= 2.0).mean()):6.3f}")
            report["track_errors_px"] = err.tolist()
    if args.json:
        Path(args.json).write_text(json.dumps(report))
    return 0


def track_pixel_errors(ds, kp_world):
    """Projected distance between model key points and ground-truth tracks.

    Tracks are matched to model key points greedily by mean error.
    Returns (T, N) errors or None when counts mismatch.
    """
    n_model = kp_world.shape[1]
    n_gt = ds.gt_world.shape[1]
    if n_model == 0 or n_gt == 0:
        return None
    proj = np.zeros((ds.frames, n_model))
    for t in range(ds.frames):
        u, _ = ds.cams[t].project(kp_world[t])
        proj[t] = u
    errs = np.zeros((ds.frames, n_model))
    cost = np.zeros((n_model, n_gt))
    for i in range(n_model):
        for j in range(n_gt):
            cost[i, j] = np.abs(proj[:, i] - ds.gt_pixel[:, j]).mean()
    taken = set()
    for i in np.argsort(cost.min(axis=1)):
        j = min((j for j in range(n_gt) if j not in taken),
                key=lambda j: cost[i, j], default=None)
        if j is None:
            break
        taken.add(j)
        errs[:, i] = np.abs(proj[:, i] - ds.gt_pixel[:, j])
    return errs


def cmd_serve(args):
    from .server import make_server

    server = make_server(args.ckpt, args.port, host=args.host,
                         density_res=args.density_res, samples=args.samples)
    print(f"serving on http://{args.host}:{args.port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


def cmd_video(args):
    from .checkpoint import cameras_from_meta, load_checkpoint
    from .editing import render_trail
    from .render import RenderConfig
    from .train import blas_limit

    model, header = load_checkpoint(args.ckpt)
    meta = header["dataset_meta"]
    trail = json.loads(Path(args.trail).read_text())
    times = [float(c.get("time", i)) for i, c in enumerate(trail["trail"])]
    configs = [np.asarray(c["keypoints"], dtype=np.float64)
               for c in trail["trail"]]
    cams = cameras_from_meta(meta)
    cam = cams[trail.get("camera_preset", 0)]
    cfg = RenderConfig(n_samples=args.samples,
                       background=tuple(meta["background"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with blas_limit():
        frames = render_trail(model, cam, times, configs, args.frames,
                              base_frame=trail.get("base_frame", 0), cfg=cfg)
    for i, f in enumerate(frames):
        np.ascontiguousarray(f.color, dtype="<f8").tofile(out / f"{i:05d}.bin")
    if args.png:
        from .synth import export_png

        export_png(out, [f.color for f in frames])
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="kpfield",
                                description="key-point editable neural fields")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("spec", help="fixture name (piano-2, slider-1, dice-cups-3) "
                                "or a scene spec JSON path")
    s.add_argument("out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--flow-noise", type=float, default=0.0)
    s.add_argument("--image-noise", type=float, default=0.0)
    s.add_argument("--png", action="store_true")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("validate", help="check a dataset directory")
    s.add_argument("dir")
    s.set_defaults(fn=cmd_validate)

    for name, fn in (("train-stage1", cmd_train_stage1), ("train", cmd_train)):
        s = sub.add_parser(name)
        s.add_argument("dir")
        if name == "train-stage1":
            s.add_argument("ckpt")
        else:
            s.add_argument("ckpt1")
            s.add_argument("tracks")
            s.add_argument("ckpt2")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--stage1-steps", type=int, default=None)
        s.add_argument("--stage2-steps", type=int, default=None)
        s.add_argument("--anneal-warp", action="store_true")
        s.add_argument("--metrics", default=None)
        s.set_defaults(fn=fn)

    s = sub.add_parser("analyze", help="detect and initialize key points")
    s.add_argument("dir")
    s.add_argument("ckpt")
    s.add_argument("tracks")
    s.add_argument("--grid-res", type=int, default=64)
    s.add_argument("--no-skipping", action="store_true")
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("render")
    s.add_argument("ckpt")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--camera", type=int, default=None)
    s.add_argument("--keypoints", default=None,
                   help="JSON file or literal N x D array")
    s.add_argument("--stage", type=int, default=2)
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="render.bin")
    s.add_argument("--png", action="store_true")
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("eval")
    s.add_argument("ckpt")
    s.add_argument("dir")
    s.add_argument("--stage", type=int, default=2)
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--frame-stride", type=int, default=1)
    s.add_argument("--json", default=None)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("serve")
    s.add_argument("ckpt")
    s.add_argument("--port", type=int, default=8787)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--density-res", type=int, default=96)
    s.add_argument("--samples", type=int, default=64)
    s.set_defaults(fn=cmd_serve)

    s = sub.add_parser("video")
    s.add_argument("ckpt")
    s.add_argument("trail")
    s.add_argument("out")
    s.add_argument("--frames", type=int, default=16)
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--png", action="store_true")
    s.set_defaults(fn=cmd_video)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
