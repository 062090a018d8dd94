"""Detection grid math, reference frames, and flow propagation."""

import numpy as np
import pytest

from kpfield import autodiff as ad
from kpfield.cameras import Camera
from kpfield.dataset import Dataset
from kpfield.fields import ModelConfig
from kpfield.kpanalysis import (AnalysisConfig, AnalysisError, KeyPointTrack,
                                VarianceGrid, build_variance_grid, compose_flow,
                                detect_reference_keypoints, flow_confidence,
                                load_tracks, propagate, save_tracks,
                                select_reference_frame, skipping_propagate)
from kpfield.params import ParamStore
from kpfield.synth import generate, piano2_spec


class GridStubModel:
    """Opaque wall at y=0.5 with a prescribed per-frame ambient value."""

    def __init__(self, ambient_fn, frames):
        self.cfg = ModelConfig(n_frames=frames, ambient_dim=1,
                               bounds_lo=(-1.0, -1.0), bounds_hi=(1.0, 1.0))
        self.ambient_fn = ambient_fn
        self.store = ParamStore()
        self.store.add("beta", np.zeros((frames, 1)))
        self._t = 0

    def field_stage1(self, x, t_idx, view_dir, tape=None, warp_window=None):
        b = x.data.shape[0]
        sigma = np.where(x.data[:, 1] >= 0.5, 1e5, 0.0)
        rgb = ad.const(np.full((b, 3), 0.5))
        self._t = int(t_idx[0]) if len(t_idx) else 0
        return rgb, ad.const(sigma), x, None

    def warp(self, x, beta, tape=None, window=None):
        return x

    def ambient_array(self, pts, t):
        return self.ambient_fn(np.atleast_2d(pts), t)


def stub_dataset(frames=4, width=24):
    cam = Camera(o=np.array([0.0, -1.0]), theta=0.0, f=30.0, c=(width - 1) / 2,
                 width=width, near=0.5, far=3.0)
    return Dataset(root=None, frames=frames, width=width, near=0.5, far=3.0,
                   background=np.ones(3), flow_sigma=0.0, image_sigma=0.0,
                   cams=[cam] * frames, images=np.zeros((frames, width, 3)),
                   depths=np.full((frames, width), 1.5),
                   masks=np.zeros((frames, width), np.uint16),
                   _fw=np.zeros((frames - 1, width)),
                   _bw=np.zeros((frames - 1, width)),
                   gt_world=None, gt_pixel=None)


def test_variance_grid_constant_ambient_is_zero():
    ds = stub_dataset()
    model = GridStubModel(lambda p, t: np.full((p.shape[0], 1), 0.7), ds.frames)
    grid = build_variance_grid(ds, model, AnalysisConfig(grid_res=16))
    assert grid.variance.max() == 0.0


def test_variance_grid_population_variance():
    # per-frame means alternate 0 and 2 -> population variance 1
    ds = stub_dataset(frames=2)
    model = GridStubModel(lambda p, t: np.full((p.shape[0], 1), 2.0 * t),
                          ds.frames)
    grid = build_variance_grid(ds, model, AnalysisConfig(grid_res=16))
    observed = grid.counts == 2
    assert observed.any()
    assert np.allclose(grid.variance[observed], 1.0)
    assert np.all(grid.variance >= 0)


def test_variance_grid_needs_surface():
    ds = stub_dataset()

    class Empty(GridStubModel):
        def field_stage1(self, x, t_idx, view_dir, tape=None, warp_window=None):
            b = x.data.shape[0]
            return (ad.const(np.full((b, 3), 0.5)),
                    ad.const(np.zeros(b)), x, None)

    with pytest.raises(AnalysisError):
        build_variance_grid(ds, Empty(lambda p, t: None, ds.frames),
                            AnalysisConfig(grid_res=16))


def make_grid(smoothed, counts=None, n_frames=10):
    g = smoothed.shape[0]
    counts = counts if counts is not None else np.full((g, g), n_frames)
    return VarianceGrid(lo=np.array([-1.0, -1.0]), hi=np.array([1.0, 1.0]),
                        res=g, counts=counts, variance=smoothed.copy(),
                        smoothed=smoothed, valid=counts >= 0.25 * n_frames,
                        n_frames=n_frames)


def test_detect_single_peak():
    s = np.zeros((16, 16))
    s[5, 7] = 1.0
    refs = detect_reference_keypoints(make_grid(s), AnalysisConfig())
    assert len(refs) == 1
    assert refs[0].cell == (5, 7)
    np.testing.assert_allclose(refs[0].position,
                               make_grid(s).cell_center((5, 7)))


def test_detect_two_equal_peaks_tie_lexicographic():
    s = np.zeros((32, 32))
    s[4, 4] = 1.0
    s[20, 20] = 1.0
    cfg = AnalysisConfig(suppress_radius=8.0)
    refs = detect_reference_keypoints(make_grid(s), cfg)
    assert len(refs) == 2
    assert refs[0].cell == (4, 4)  # equal scores resolved by cell index
    assert refs[1].cell == (20, 20)


def test_detect_suppresses_nearby_and_floors_small():
    s = np.zeros((32, 32))
    s[10, 10] = 1.0
    s[12, 12] = 0.9   # inside the suppression radius
    s[25, 25] = 0.05  # below the floor
    refs = detect_reference_keypoints(make_grid(s), AnalysisConfig())
    assert [r.cell for r in refs] == [(10, 10)]


def test_detect_ignores_invalid_cells():
    s = np.zeros((16, 16))
    s[3, 3] = 1.0    # invalid cell: not a candidate
    s[8, 8] = 0.6
    counts = np.full((16, 16), 10)
    counts[3, 3] = 1
    refs = detect_reference_keypoints(make_grid(s, counts), AnalysisConfig())
    assert [r.cell for r in refs] == [(8, 8)]


def test_detect_empty_raises():
    with pytest.raises(AnalysisError):
        detect_reference_keypoints(make_grid(np.zeros((8, 8))), AnalysisConfig())


def test_reference_frame_selection():
    ds = stub_dataset(frames=10, width=32)
    cam = ds.cams[0]
    k = cam.unproject(np.array(14.0), np.array(1.4))
    depths = np.full((10, 32), 99.0)  # far everywhere: occluded
    depths[7:, :] = 1.4               # visible from frame 7 on
    t = select_reference_frame(k, depths, ds.cams, delta=0.02, width=32)
    assert t == 7
    depths[:, :] = 1.4
    assert select_reference_frame(k, depths, ds.cams, 0.02, 32) == 0
    with pytest.raises(AnalysisError, match="best residual"):
        select_reference_frame(k, depths, ds.cams, 0.0, 32)


def test_propagate_zero_flow_constant():
    ds = stub_dataset(frames=6, width=32)
    k = ds.cams[0].unproject(np.array(11.0), np.array(1.5))
    tr = propagate(k, 2, ds, ds.depths)
    assert np.allclose(tr.pixels, tr.pixels[2])
    assert tr.provenance[2] == "reference"
    assert all(p == "frame-by-frame" for i, p in enumerate(tr.provenance) if i != 2)
    # lift/project consistency
    for t in range(6):
        u, front = ds.cams[t].project(tr.world[t])
        assert front and abs(u - tr.pixels[t]) < 1e-6


def test_propagate_follows_exact_fixture_flow(tmp_path):
    spec = piano2_spec(frames=24, width=64)
    ds = Dataset.load(generate(spec, tmp_path / "ds"))
    t_ref = 0
    k = ds.gt_world[t_ref, 0]
    tr = propagate(k, t_ref, ds, ds.depths)
    assert np.max(np.abs(tr.pixels - ds.gt_pixel[:, 0])) < 1.0


def test_noisy_flow_error_grows_with_distance(tmp_path):
    spec = piano2_spec(frames=64, width=96, flow_noise=0.5, dolly=0)
    ds = Dataset.load(generate(spec, tmp_path / "ds", seed=11))
    err = np.zeros(ds.frames)
    for i in range(2):
        tr = propagate(ds.gt_world[0, i], 0, ds, ds.depths)
        err += np.abs(tr.pixels - ds.gt_pixel[:, i])
    third = ds.frames // 3
    assert err[-third:].mean() > err[:third].mean()


def test_flow_confidence_values():
    ds = stub_dataset(frames=5, width=32)
    # zero flow: perfect round trip
    assert flow_confidence(ds, 10.0, 1, 3) == pytest.approx(1e6)
    # forward +2/step, backward 0: round-trip error 2 over one block
    ds._fw = np.full((4, 32), 2.0)
    ds._bw = np.zeros((4, 32))
    conf = flow_confidence(ds, 10.0, 0, 1)
    assert conf == pytest.approx(1.0 / (1e-6 + 2.0), rel=1e-6)


def test_compose_flow_steps_both_ways():
    ds = stub_dataset(frames=4, width=64)
    ds._fw = np.full((3, 64), 1.5)
    ds._bw = np.full((3, 64), -1.5)
    assert compose_flow(ds, 10.0, 0, 3) == pytest.approx(14.5)
    assert compose_flow(ds, 14.5, 3, 0) == pytest.approx(10.0)


def test_skipping_no_confident_anchor_is_noop(tmp_path):
    spec = piano2_spec(frames=24, width=64, flow_noise=0.5, dolly=0)
    ds = Dataset.load(generate(spec, tmp_path / "ds", seed=3))
    tr = propagate(ds.gt_world[0, 0], 0, ds, ds.depths)
    out = skipping_propagate(tr, ds, ds.depths, stride=6, conf_threshold=1e9)
    assert np.array_equal(out.pixels, tr.pixels)
    assert out.provenance == tr.provenance


def test_skipping_exact_flow_identical(tmp_path):
    spec = piano2_spec(frames=24, width=64)
    ds = Dataset.load(generate(spec, tmp_path / "ds"))
    tr = propagate(ds.gt_world[0, 0], 0, ds, ds.depths)
    out = skipping_propagate(tr, ds, ds.depths, stride=4, conf_threshold=0.5)
    # identical up to float32 flow-file storage precision
    assert np.max(np.abs(out.pixels - tr.pixels)) < 1e-6
    assert "skip" in out.provenance  # anchors accepted, values unchanged


def anticorrelation_statistic(ds, step=3, refs=(0, 16, 32, 48)):
    """Rank correlation of round-trip confidence vs true composed-flow error,
    pooled over tracks and several reference frames."""
    from scipy.stats import spearmanr

    confs, errs = [], []
    for i in range(ds.gt_pixel.shape[1]):
        for t_ref in refs:
            ref_px = ds.gt_pixel[t_ref, i]
            for t in range(0, ds.frames, step):
                if abs(t - t_ref) < step:
                    continue
                confs.append(flow_confidence(ds, ref_px, t_ref, t))
                errs.append(abs(compose_flow(ds, ref_px, t_ref, t)
                                - ds.gt_pixel[t, i]))
    return float(spearmanr(confs, errs).statistic)


def test_confidences_anticorrelate_with_error(tmp_path):
    spec = piano2_spec(frames=64, width=96, flow_noise=0.5, dolly=0)
    ds = Dataset.load(generate(spec, tmp_path / "ds", seed=7))
    assert anticorrelation_statistic(ds) < 0.0


def test_tracks_io_round_trip(tmp_path):
    tr = KeyPointTrack(t_ref=3, pixels=np.arange(6.0),
                       world=np.arange(12.0).reshape(6, 2),
                       confidence=np.array([np.nan, 1, 2, np.nan, 0.5, 9]),
                       provenance=["frame-by-frame"] * 3 + ["skip"] * 3,
                       clamped=np.zeros(6, bool))
    save_tracks(tmp_path / "tracks.json", [tr])
    back = load_tracks(tmp_path / "tracks.json")[0]
    assert back.t_ref == 3
    assert np.array_equal(back.pixels, tr.pixels)
    assert np.array_equal(back.world, tr.world)
    assert back.provenance == tr.provenance
    assert np.isnan(back.confidence[0]) and back.confidence[2] == 2
