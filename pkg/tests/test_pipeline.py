import time

import numpy as np
import pytest

from pmslam.errors import ConfigError, EmptyBufferError, StageError, TooFewFramesError
from pmslam.eval import build_gt_cloud, evaluate
from pmslam.geometry import Pointmap
from pmslam.oracle import GroundTruth, OracleI2P, OracleL2W, StubI2P, StubL2W, oracle_scorer, stub_scorer
from pmslam.pipeline import (
    Keyframe,
    LocalPrediction,
    PipelineConfig,
    Window,
    expected_registrations,
    filter_by_confidence,
    init_scene,
    init_window,
    make_windows,
    register_step,
    run,
    window_ids,
)
from pmslam.synth import gen_scene


@pytest.fixture(scope="module")
def scene():
    return gen_scene(3, n_frames=64)


def oracle_run(scene, n, sigma_frac=0.01, cfg=None, **kw):
    gt = GroundTruth.from_scene(scene)
    sigma = sigma_frac * scene.diameter
    cfg = cfg or PipelineConfig(conf_threshold=0)
    res = run(OracleI2P(gt, sigma, seed=1), OracleL2W(gt, sigma, seed=2), oracle_scorer(gt),
              scene.images[:n], cfg, scene.intrinsics, **kw)
    return res, sigma


# ----------------------------------------------------------------- windows


def test_every_frame_is_keyframe_once():
    cfg = PipelineConfig(l=11, skip=1, stride=1)
    wins = make_windows(100, cfg)
    assert [w.key_id for w in wins] == list(range(100))
    assert all(len(w) == 11 for w in wins)


def test_skip_twenty_offsets():
    w = window_ids(100, 300, 11, 20)
    assert [i - 100 for i in w.frame_ids] == [-100, -80, -60, -40, -20, 0, 20, 40, 60, 80, 100]
    assert w.key_id == 100


def test_boundary_windows_clamped():
    # -60..-100 fall below 0, so the window reaches further right instead
    w = window_ids(50, 300, 11, 20)
    assert [i - 50 for i in w.frame_ids] == [-40, -20, 0, 20, 40, 60, 80, 100, 120, 140, 160]
    # not enough frames at this spacing: shortened
    assert window_ids(50, 120, 11, 20).frame_ids == (10, 30, 50, 70, 90, 110)
    assert window_ids(1, 3, 11, 1).frame_ids == (0, 1, 2)


def test_two_frames_single_window():
    wins = make_windows(2, PipelineConfig(l=11))
    assert [w.frame_ids for w in wins] == [(0, 1), (0, 1)]
    assert [w.key_id for w in wins] == [0, 1]
    with pytest.raises(TooFewFramesError):
        make_windows(1, PipelineConfig())


def test_init_window_spacing():
    assert init_window(100, PipelineConfig(skip=20)).frame_ids == (0, 20, 40, 60, 80)
    assert init_window(30, PipelineConfig(skip=20)).frame_ids == (0, 1, 2, 3, 4)
    assert init_window(3, PipelineConfig()).frame_ids == (0, 1, 2)


def test_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(conf_threshold=0.5)
    with pytest.raises(ConfigError):
        PipelineConfig(k=0)
    with pytest.raises(ConfigError):
        PipelineConfig(selection="nearest")
    assert PipelineConfig.preset("sampled-style").co == 2


# -------------------------------------------------------------------- init


class CountingI2P:
    """Confidence total chosen per keyframe index; records calls."""

    def __init__(self, totals):
        self.totals = totals
        self.calls = []

    def run(self, frames, window):
        self.calls.append(window.key_index)
        n = len(window)
        pm = Pointmap.full(np.ones((2, 2, 3)))
        conf = np.full((n, 2, 2), self.totals[window.key_index] / (4 * n))
        return LocalPrediction([pm] * n, conf, list(window.frame_ids), window.frame_ids, window.key_index)


def test_init_runs_every_keyframe_choice():
    i2p = CountingI2P([10, 30, 20, 5, 1])
    state, best, runs = init_scene(i2p, np.zeros((5, 2, 2, 3)), Window((0, 1, 2, 3, 4), 0), PipelineConfig(conf_threshold=0))
    assert i2p.calls == [0, 1, 2, 3, 4]
    assert best == 1 and len(runs) == 5
    assert state.buffer.ids() == [0, 1, 2, 3, 4]
    assert len(state.scene) == 5 * 4


def test_init_tie_goes_to_lower_index():
    i2p = CountingI2P([10, 30, 30, 5, 30])
    _, best, _ = init_scene(i2p, np.zeros((5, 2, 2, 3)), Window((0, 1, 2, 3, 4), 0), PipelineConfig(conf_threshold=0))
    assert best == 1


# ----------------------------------------------------------------- filter


def test_filter_by_confidence():
    rng = np.random.default_rng(0)
    conf = 1 + rng.exponential(2.5, (6, 7))
    pts = rng.normal(size=(6, 7, 3))
    assert filter_by_confidence(pts, conf, 0).all()
    assert not filter_by_confidence(pts, np.full((6, 7), 2.0), 3).any()
    keep = filter_by_confidence(pts, conf, 3)
    for v in range(6):
        for u in range(7):
            assert keep[v, u] == (conf[v, u] > 3)
    with pytest.raises(ValueError):
        filter_by_confidence(pts, conf, -1)


# -------------------------------------------------------------- registration


def test_register_empty_batch_is_noop(scene):
    gt = GroundTruth.from_scene(scene)
    cfg = PipelineConfig(conf_threshold=0)
    state, _, _ = init_scene(OracleI2P(gt), scene.images, init_window(64, cfg), cfg)
    before = len(state.scene)
    assert register_step(state, [], OracleL2W(gt), oracle_scorer(gt)) == []
    assert len(state.scene) == before


def test_register_excludes_same_batch(scene):
    gt = GroundTruth.from_scene(scene)
    cfg = PipelineConfig(conf_threshold=0, k=3, co=2)
    state, _, _ = init_scene(OracleI2P(gt), scene.images, init_window(64, cfg), cfg)
    i2p = OracleI2P(gt)
    batch = []
    for key in (5, 6):
        p = i2p.run(scene.images, window_ids(key, 64, 5, 1))
        batch.append(Keyframe(key, p.key_feature, p.key_pointmap, p.key_conf))
    refs = register_step(state, batch, OracleL2W(gt), oracle_scorer(gt))
    assert len(refs) == 3 and not {5, 6} & set(refs)
    assert state.registered == 2 and len(state.log_lines) == 2


def test_register_step_empty_buffer_propagates():
    from pmslam.pipeline import RegistrationState, SceneModel
    from pmslam.retrieval import BufferSet

    state = RegistrationState(PipelineConfig(), SceneModel(), BufferSet(3))
    kf = Keyframe(0, 0, Pointmap.full(np.ones((2, 2, 3))), np.ones((2, 2)))
    with pytest.raises(EmptyBufferError):
        register_step(state, [kf], StubL2W((2, 2)), stub_scorer)


def test_recent_selection_uses_previous_ids(scene):
    res, _ = oracle_run(scene, 20, cfg=PipelineConfig(conf_threshold=0, selection="recent", k=3))
    line = next(x for x in res.log_lines if x.startswith("window 10 "))
    assert "refs=9,8,7" in line


def test_sampled_style_path_runs(scene):
    cfg = PipelineConfig.preset("sampled-style", conf_threshold=0)
    res, _ = oracle_run(scene, 24, cfg=cfg)
    assert res.registered == expected_registrations(24, cfg)


# ---------------------------------------------------------------- end to end


def test_oracle_twenty_frames_accuracy(scene):
    res, sigma = oracle_run(scene, 20)
    gt_cloud = build_gt_cloud(scene.depth[:20], scene.intrinsics, scene.poses[:20])
    rep = evaluate(res.scene.points, gt_cloud, cap=None, seed=0)
    assert rep.accuracy <= 2 * sigma
    assert rep.completeness <= 2 * sigma


def test_oracle_drift_after_fifty_windows(scene):
    res, sigma = oracle_run(scene, 56)
    assert res.registered >= 50
    last = max(res.scene.frames)
    to_pipeline = scene.poses[res.init_keyframe].inverse()
    truth = scene.world_points(last).transformed(to_pipeline)
    got = res.scene.frames[last].global_points
    m = truth.valid & got.valid
    drift = np.linalg.norm(got.points[m].mean(0) - truth.points[m].mean(0))
    assert drift <= 2 * sigma


def test_every_frame_contributes_once(scene):
    cfg = PipelineConfig(conf_threshold=0)
    res, _ = oracle_run(scene, 30, cfg=cfg)
    assert sorted(res.scene.contributed) == list(range(30))
    assert res.registered == expected_registrations(30, cfg) == 30 - cfg.l_init
    counts = np.bincount(res.scene.frame_ids, minlength=30)
    assert np.all(counts == 64 * 64)
    # every (frame, pixel) pair appears once
    key = res.scene.frame_ids.astype(np.int64) * 4096 + res.scene.pixel_index
    assert len(np.unique(key)) == len(key)


def test_world_frame_is_init_keyframe_camera(scene):
    res, _ = oracle_run(scene, 12, sigma_frac=0.0)
    k = res.init_keyframe
    pm = res.scene.frames[k].global_points
    local = GroundTruth.from_scene(scene).local(k, k)
    np.testing.assert_allclose(pm.points[pm.valid], local.points[local.valid], atol=1e-9)


def test_reproducible(scene):
    a, _ = oracle_run(scene, 24)
    b, _ = oracle_run(scene, 24)
    assert np.array_equal(a.scene.points, b.scene.points)
    assert a.log_lines == b.log_lines


def test_overlap_mode_matches_serial(scene):
    cfg = PipelineConfig(conf_threshold=0, co=3, k=4)
    a, _ = oracle_run(scene, 24, cfg=cfg)
    b, _ = oracle_run(scene, 24, cfg=cfg, overlap=True)
    assert np.array_equal(a.scene.points, b.scene.points)
    assert a.log_lines == b.log_lines


def test_stage_errors_are_tagged():
    class Broken:
        def run(self, frames, window):
            raise FloatingPointError("nan in decoder")

    with pytest.raises(StageError) as info:
        run(Broken(), StubL2W(), stub_scorer, np.zeros((6, 64, 64, 3)), PipelineConfig())
    assert info.value.stage == "init"
    with pytest.raises(StageError) as info:
        run(StubI2P(), StubL2W(), stub_scorer, np.zeros((1, 64, 64, 3)), PipelineConfig())
    assert info.value.stage == "windows"


def test_stub_fps_matches_definition():
    frames = np.zeros((120, 64, 64, 3))
    t = time.perf_counter()
    res = run(StubI2P(), StubL2W(), stub_scorer, frames, PipelineConfig(conf_threshold=0))
    wall = time.perf_counter() - t
    assert res.fps == pytest.approx(120 / res.timings["total"], rel=1e-12)
    assert res.timings["total"] <= wall
    assert 120 / wall == pytest.approx(res.fps, rel=0.05)
