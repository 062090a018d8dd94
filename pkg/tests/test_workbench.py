"""Checkpoints, editing operations, and the CLI surface."""

import json

import numpy as np
import pytest

from kpfield import autodiff as ad
from kpfield.checkpoint import (cameras_from_meta, dataset_meta_for,
                                load_checkpoint, save_checkpoint)
from kpfield.cli import main as cli_main
from kpfield.dataset import Dataset
from kpfield.editing import (EditError, default_depth, extrapolation_warning,
                             fit_affine, interpolate_keypoints, motion_transfer,
                             render_trail, trail_keypoints)
from kpfield.fields import SceneModel
from kpfield.render import RenderConfig, render_image
from kpfield.synth import generate, piano2_spec
from kpfield.train import init_keypoints_from_tracks, model_for_dataset

from test_fields import tiny_cfg


@pytest.fixture(scope="module")
def small_setup(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("wb")
    spec = piano2_spec(frames=8, width=48)
    ds = Dataset.load(generate(spec, tmp / "ds"))
    model = model_for_dataset(ds, n_keypoints=2,
                              model_cfg=tiny_cfg(n_keypoints=2), seed=4)
    model.cfg.n_frames = ds.frames
    init_keypoints_from_tracks(model, ds.gt_world, np.zeros(2, np.int64))
    return tmp, ds, model


def test_checkpoint_round_trip_bitwise(small_setup, tmp_path):
    tmp, ds, model = small_setup
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, dataset_meta=dataset_meta_for(ds))
    back, header = load_checkpoint(path)
    for name, blk in model.store.items():
        assert np.array_equal(back.store.get(name), blk.data), name
    assert np.array_equal(back.keypoints.t_ref, model.keypoints.t_ref)

    cfg = RenderConfig(n_samples=12, jitter=True, background=tuple(ds.background))
    a = render_image(model, ds.cams[2], 2, cfg, seed=9)
    b = render_image(back, ds.cams[2], 2, cfg, seed=9)
    assert np.array_equal(a.color, b.color)
    assert np.array_equal(a.depth, b.depth)

    cams = cameras_from_meta(header["dataset_meta"])
    assert len(cams) == ds.frames
    assert np.allclose(cams[0].o, ds.cams[0].o)


def test_checkpoint_truncation_detected(small_setup, tmp_path):
    tmp, ds, model = small_setup
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_default_depth_mean_of_nearest(small_setup):
    _, ds, model = small_setup
    cam = ds.cams[0]
    # plant two key points at known depths around the query pixel
    kp = model.keypoint_positions().copy()
    kp[:, 0] = cam.unproject(np.array(20.0), np.array(1.5))
    kp[:, 1] = cam.unproject(np.array(22.0), np.array(2.5))
    model.set_keypoint_positions(kp)
    d = default_depth(model, cam, 21.0, k=2 * ds.frames)
    assert abs(d - 2.0) < 1e-9
    d1 = default_depth(model, cam, 20.1, k=1)
    assert abs(d1 - 1.5) < 1e-9
    init_keypoints_from_tracks(model, ds.gt_world, np.zeros(2, np.int64))


def test_default_depth_no_projectable_points(small_setup):
    _, ds, model = small_setup
    from kpfield.cameras import Camera

    # camera facing away from every stored position
    cam = Camera(o=np.array([0.0, -5.0]), theta=np.pi, f=50.0, c=24.0,
                 width=48, near=0.5, far=3.0)
    with pytest.raises(EditError):
        default_depth(model, cam, 10.0)


def test_interpolate_endpoints_and_midpoint():
    a = np.array([[0.0, 0.0]])
    b = np.array([[2.0, 4.0]])
    assert np.array_equal(interpolate_keypoints(a, b, 0.0), a)
    assert np.array_equal(interpolate_keypoints(a, b, 1.0), b)
    assert np.array_equal(interpolate_keypoints(a, b, 0.5), [[1.0, 2.0]])
    with pytest.raises(EditError):
        interpolate_keypoints(a, np.zeros((2, 2)), 0.5)


def test_motion_transfer_identity_translation_affine():
    src = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    track = np.random.default_rng(0).uniform(-1, 1, (10, 2))
    out = motion_transfer(track, src, src)
    assert np.allclose(out, track, atol=1e-12)
    out = motion_transfer(track, src, src + [0.5, -0.25])
    assert np.allclose(out, track + [0.5, -0.25], atol=1e-12)

    theta = 0.7
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]]) * 1.6
    off = np.array([0.3, -0.8])
    dst = src @ rot.T + off
    a, b = fit_affine(src, dst)
    assert np.allclose(a, rot, atol=1e-9)
    assert np.allclose(b, off, atol=1e-9)


def test_motion_transfer_rejects_collinear():
    src = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    with pytest.raises(EditError, match="collinear"):
        fit_affine(src, src)


def test_trail_sampling_and_endpoints(small_setup):
    _, ds, model = small_setup
    c0 = model.keypoint_positions()[0]
    c1 = c0 + [[0.05, 0.1], [0.0, -0.1]]
    ks = trail_keypoints([0.0, 1.0], [c0, c1], 5)
    assert ks.shape == (5, 2, 2)
    assert np.allclose(ks[0], c0) and np.allclose(ks[-1], c1)
    cfg = RenderConfig(n_samples=8, background=tuple(ds.background))
    frames = render_trail(model, ds.cams[0], [0.0, 1.0], [c0, c1], 3,
                          base_frame=0, cfg=cfg)
    a = render_image(model, ds.cams[0], 0, cfg, k_override=c0, seed=0)
    b = render_image(model, ds.cams[0], 0, cfg, k_override=c1, seed=0)
    assert np.array_equal(frames[0].color, a.color)
    assert np.array_equal(frames[-1].color, b.color)


def test_extrapolation_warning(small_setup):
    _, ds, model = small_setup
    k = model.keypoint_positions()[0]
    assert not extrapolation_warning(model, k)
    far_k = k + 10.0 * model.scene_diagonal()
    assert extrapolation_warning(model, far_k)


# ------------------------------------------------------------------ CLI

def test_cli_synth_validate_round_trip(tmp_path, capsys):
    out = tmp_path / "ds"
    assert cli_main(["synth", "piano-2", str(out), "--seed", "1"]) == 0
    assert cli_main(["validate", str(out)]) == 0
    # a truncated file must flip the exit code
    victim = out / "rgb" / "00001.bin"
    victim.write_bytes(victim.read_bytes()[:-4])
    assert cli_main(["validate", str(out)]) == 1


def test_cli_render_keypoint_override_matches_stored(small_setup, tmp_path):
    tmp, ds, model = small_setup
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, model, dataset_meta=dataset_meta_for(ds))
    t = 3
    stored = model.keypoint_positions()[t]
    out_a = tmp_path / "a.bin"
    out_b = tmp_path / "b.bin"
    assert cli_main(["render", str(ckpt), "--frame", str(t), "--samples", "8",
                     "--out", str(out_a)]) == 0
    kp_file = tmp_path / "kp.json"
    kp_file.write_text(json.dumps(stored.tolist()))
    assert cli_main(["render", str(ckpt), "--frame", str(t), "--samples", "8",
                     "--keypoints", str(kp_file), "--out", str(out_b)]) == 0
    assert out_a.read_bytes() == out_b.read_bytes()


def test_cli_eval_reports_psnr(small_setup, tmp_path, capsys):
    tmp, ds, model = small_setup
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, model, dataset_meta=dataset_meta_for(ds))
    rep = tmp_path / "report.json"
    assert cli_main(["eval", str(ckpt), str(tmp / "ds"), "--samples", "8",
                     "--frame-stride", "4", "--json", str(rep)]) == 0
    report = json.loads(rep.read_text())
    assert "mean_psnr" in report
    out = capsys.readouterr().out
    assert "psnr" in out


def test_cli_video_writes_frames(small_setup, tmp_path):
    tmp, ds, model = small_setup
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, model, dataset_meta=dataset_meta_for(ds))
    c0 = model.keypoint_positions()[0]
    trail = {"trail": [{"time": 0.0, "keypoints": c0.tolist()},
                       {"time": 1.0, "keypoints": (c0 + 0.05).tolist()}],
             "base_frame": 0}
    trail_file = tmp_path / "trail.json"
    trail_file.write_text(json.dumps(trail))
    out = tmp_path / "video"
    assert cli_main(["video", str(ckpt), str(trail_file), str(out),
                     "--frames", "4", "--samples", "8"]) == 0
    files = sorted(out.glob("*.bin"))
    assert len(files) == 4


def test_cli_unknown_missing_files(tmp_path):
    assert cli_main(["eval", str(tmp_path / "nope.ckpt"), str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        cli_main(["not-a-command"])
