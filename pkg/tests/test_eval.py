import json

import numpy as np
import pytest

from pmslam.errors import EmptyInputError, ShapeError
from pmslam.eval import (
    EvalReport,
    accuracy,
    align_for_eval,
    aligned_ate,
    ate_rmse,
    build_gt_cloud,
    completeness,
    evaluate,
    fps,
)
from pmslam.geometry import CameraIntrinsics, Pose, Sim3, backproject, rotation_about, so3_exp
from pmslam.synth import gen_scene


def brute_mean_nn(a, b):
    total = 0.0
    for p in a:
        total += min(float(np.sqrt(((p - q) ** 2).sum())) for q in b)
    return total / len(a)


# ---------------------------------------------------------------- cloud metrics


def test_two_by_one():
    assert accuracy([[0, 0, 0], [1, 0, 0]], [[0, 0, 0]]) == 0.5


def test_one_by_two():
    assert completeness([[0, 0, 0]], [[0, 0, 0], [0, 2, 0]]) == 1.0


def test_identity_and_containment():
    x = np.random.default_rng(0).normal(size=(50, 3))
    assert accuracy(x, x) == 0.0
    assert completeness(np.concatenate([x, x + 5]), x) == 0.0


def test_tree_equals_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a, b = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
        assert accuracy(a, b) == pytest.approx(brute_mean_nn(a, b), rel=1e-14)
        assert completeness(a, b) == pytest.approx(brute_mean_nn(b, a), rel=1e-14)


def test_accuracy_completeness_symmetry():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(170, 3))
    assert accuracy(a, b) == completeness(b, a)


def test_rigid_invariance():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(150, 3))
    T = Sim3(so3_exp([0.4, -1.1, 0.3]), [3.0, -2.0, 1.0])
    assert abs(accuracy(T.apply(a), T.apply(b)) - accuracy(a, b)) < 1e-9


def test_empty_cloud():
    with pytest.raises(EmptyInputError):
        accuracy(np.zeros((0, 3)), np.ones((2, 3)))
    with pytest.raises(EmptyInputError):
        completeness(np.ones((2, 3)), np.zeros((0, 3)))


# -------------------------------------------------------------------- ATE


def _traj(rng, n):
    return [Pose(so3_exp(rng.normal(size=3) * 0.3), rng.normal(size=3)) for _ in range(n)]


def test_ate_identity_and_offset():
    traj = _traj(np.random.default_rng(4), 10)
    assert ate_rmse(traj, traj) == 0.0
    shifted = [Pose(p.rotation, p.translation + [1.0, 0, 0]) for p in traj]
    assert ate_rmse(shifted, traj) == pytest.approx(1.0, abs=1e-15)


def test_ate_loop_oracle():
    rng = np.random.default_rng(5)
    a, b = _traj(rng, 12), _traj(rng, 12)
    s = 0.0
    for p, q in zip(a, b):
        s += sum((x - y) ** 2 for x, y in zip(p.center, q.center))
    assert abs(ate_rmse(a, b) - (s / 12) ** 0.5) < 1e-12


def test_ate_rigid_invariance_and_alignment():
    rng = np.random.default_rng(6)
    a, b = _traj(rng, 15), _traj(rng, 15)
    T = Pose(rotation_about([0, 1, 1], 0.7), [1.0, 2.0, -1.0])
    move = lambda traj: [T.compose(p) for p in traj]  # noqa: E731
    assert abs(ate_rmse(move(a), move(b)) - ate_rmse(a, b)) < 1e-12
    S = Sim3(rotation_about([1, 0, 0], 0.4), [0.5, 0, 2], 2.5)
    scaled = [S.apply(p.center[None])[0] for p in a]
    assert aligned_ate(scaled, a) < 1e-9


def test_ate_length_mismatch():
    traj = _traj(np.random.default_rng(7), 4)
    with pytest.raises(ShapeError):
        ate_rmse(traj, traj[:3])


# ----------------------------------------------------------------- GT cloud


def test_gt_cloud_single_and_duplicate():
    intr = CameraIntrinsics(5.0, 5.0, 3.5, 3.5)
    rng = np.random.default_rng(8)
    d = rng.uniform(1, 2, (8, 8))
    d[0, 0] = 0
    pose = Pose(so3_exp([0.1, 0.2, 0.3]), [1, 2, 3])
    pm = backproject(d, intr, pose)
    one = build_gt_cloud([d], intr, [pose])
    np.testing.assert_array_equal(one, pm.points[pm.valid])
    two = build_gt_cloud([d, d], intr, [pose, pose])
    assert len(two) == 2 * len(one)
    with pytest.raises(ShapeError):
        build_gt_cloud([d], intr, [pose, pose])


def test_gt_cloud_counts_valid_pixels():
    scene = gen_scene(11, n_frames=6)
    cloud, fids, pix = build_gt_cloud(scene.depth, scene.intrinsics, scene.poses, return_index=True)
    assert len(cloud) == int((scene.depth > 0).sum())
    assert len(fids) == len(pix) == len(cloud)


# ---------------------------------------------------------------- alignment


def _room_cloud(seed=9, n=3000):
    rng = np.random.default_rng(seed)
    floor = rng.uniform([0, 0, 0], [4, 4, 0], (n // 3, 3))
    wall = rng.uniform([0, 0, 0], [0, 4, 3], (n // 3, 3))
    box = rng.uniform([1, 1, 0], [2, 1.5, 1], (n - 2 * (n // 3), 3))
    box[:, 2] = np.where(rng.random(len(box)) < 0.5, 1.0, box[:, 2])
    return np.concatenate([floor, wall, box])


def test_align_recovers_similarity():
    gt = _room_cloud()
    T = Sim3(so3_exp([0.3, -0.2, 0.5]), [0.4, -0.3, 0.2], 0.7)
    pred = T.apply(gt)
    idx = np.arange(len(gt))
    est = align_for_eval(pred, gt, sample_n=2000, pairs=(idx, idx))
    inv = T.inverse()
    np.testing.assert_allclose(est.rotation, inv.rotation, atol=1e-6)
    np.testing.assert_allclose(est.translation, inv.translation, atol=1e-6)
    assert abs(est.scale - inv.scale) < 1e-6
    assert accuracy(est.apply(pred), gt) < 1e-6


def test_align_without_correspondences():
    gt = _room_cloud(10)
    T = Sim3(so3_exp([0.1, 0.15, -0.1]), [0.2, 0.1, 0.0], 1.2)
    est = align_for_eval(T.apply(gt), gt, sample_n=3000, max_iter=100)
    assert accuracy(est.apply(T.apply(gt)), gt) < 1e-3


def test_align_fixed_point():
    gt = _room_cloud(12)
    est = align_for_eval(gt, gt, sample_n=500)
    np.testing.assert_allclose(est.matrix(), np.eye(4), atol=1e-9)


def test_sample_n_clamped():
    gt = _room_cloud(13, 60)
    est = align_for_eval(gt, gt, sample_n=10_000)
    np.testing.assert_allclose(est.matrix(), np.eye(4), atol=1e-9)


# ----------------------------------------------------------------- fps, report


def test_fps():
    assert fps(100, 4.0) == 25.0
    assert fps(0, 3.0) == 0.0
    with pytest.raises(ValueError):
        fps(10, 0.0)


def test_report_formats(tmp_path):
    gt = _room_cloud(14, 300)
    rep = evaluate(gt + 0.001, gt, frame_count=10, elapsed=2.0, cap=None)
    assert isinstance(rep, EvalReport) and rep.fps == 5.0
    keys = [line.split("=", 1)[0] for line in rep.to_text().splitlines()]
    assert keys[:6] == ["accuracy", "completeness", "ate_rmse", "fps", "P", "Q"]
    rep.write(tmp_path / "r.json")
    back = json.loads((tmp_path / "r.json").read_text(encoding="utf-8"))
    assert list(back) == list(rep.as_dict())
    assert back["P"] == back["Q"] == 300 and back["ate_rmse"] is None
