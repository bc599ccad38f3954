import dataclasses

import numpy as np
import pytest
import torch

from pmslam.errors import NumericError, TooFewFramesError
from pmslam.geometry import Pose, backproject, so3_exp
from pmslam.i2p import I2PNet
from pmslam.l2w import L2WNet
from pmslam.nn import BlockConfig
from pmslam.retrieval import RetrievalHead
from pmslam.synth import ROOM_DIAMETER, gen_scene, make_training_clips
from pmslam.synth.scene import ROOM
from pmslam.synth.train import (
    FrameCache,
    TrainConfig,
    held_out_i2p_loss,
    keyframe_error,
    l2w_batch,
    l2w_loss_on,
    retrieval_pairs,
    train_i2p_toy,
    train_l2w_toy,
    train_retrieval_head,
)

SMALL = BlockConfig(d=16, heads=2, mlp_ratio=2.0, p=4, m=1, n=2, img_size=(16, 16))


@pytest.fixture(scope="module")
def scene():
    return gen_scene(21, n_frames=24)


@pytest.fixture(scope="module")
def small_scenes():
    return [gen_scene(s, n_frames=16, size=(16, 16)) for s in (31, 32)]


def params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# ------------------------------------------------------------------ scenes


def test_gen_scene_deterministic():
    a, b = gen_scene(5, n_frames=6), gen_scene(5, n_frames=6)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.boxes, b.boxes)


def test_gen_scene_ranges():
    s = gen_scene(8)
    assert 64 <= s.n_frames <= 256
    assert 5 <= len(s.boxes) <= 15
    assert np.all(s.boxes[:, 0] >= ROOM[0]) and np.all(s.boxes[:, 1] <= ROOM[1])
    assert ROOM_DIAMETER == pytest.approx(np.sqrt(41))
    # bounded angular velocity between consecutive frames
    steps = [np.degrees(np.arccos(np.clip((np.trace(p.rotation.T @ q.rotation) - 1) / 2, -1, 1)))
             for p, q in zip(s.poses, s.poses[1:])]
    assert max(steps) < 8.0


def _ray_box(o, d, lo, hi):
    tmin, tmax = -np.inf, np.inf
    for a in range(3):
        if d[a] == 0:
            if not lo[a] <= o[a] <= hi[a]:
                return None
            continue
        t1, t2 = (lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]
        tmin, tmax = max(tmin, min(t1, t2)), min(tmax, max(t1, t2))
    return tmin if tmax >= tmin and tmin > 0 else None


def _ray_room(o, d):
    best = np.inf
    for a in range(3):
        for wall in (ROOM[0][a], ROOM[1][a]):
            if d[a] != 0:
                t = (wall - o[a]) / d[a]
                if t > 0:
                    best = min(best, t)
    return best


def test_depth_matches_ray_box_oracle(scene):
    rng = np.random.default_rng(0)
    intr = scene.intrinsics
    for f in (0, 7, 19):
        pose = scene.poses[f]
        for _ in range(40):
            v, u = rng.integers(0, 64, 2)
            d = pose.rotation @ np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
            t = _ray_room(pose.translation, d)
            for lo, hi in scene.boxes:
                hit = _ray_box(pose.translation, d, lo, hi)
                if hit is not None:
                    t = min(t, hit)
            assert abs(scene.depth[f, v, u] - t) < 1e-9


def test_backprojection_lies_on_surfaces(scene):
    for f in (0, 11, 23):
        pm = scene.world_points(f)
        assert pm.valid.all()
        assert scene.surface_distance(pm.points[pm.valid]).max() < 1e-6


def test_reprojection_lands_on_source_pixel(scene):
    intr = scene.intrinsics
    pm = scene.world_points(4)
    cam = pm.transformed(scene.poses[4].inverse()).points
    u = intr.fx * cam[..., 0] / cam[..., 2] + intr.cx
    v = intr.fy * cam[..., 1] / cam[..., 2] + intr.cy
    vv, uu = np.mgrid[0:64, 0:64]
    assert np.abs(u - uu).max() < 1e-6 and np.abs(v - vv).max() < 1e-6


# ------------------------------------------------------------------- clips


def test_i2p_clip_keyframe_is_identity_backprojection(scene):
    clip = make_training_clips(scene, 11)[3]
    assert clip.key_index == 5
    gt = clip.gt_pointmaps()[5]
    ref = backproject(scene.depth[clip.frame_ids[5]], scene.intrinsics)
    np.testing.assert_allclose(gt.points, ref.points, atol=1e-12)


def test_l2w_clip_split(scene):
    clips = make_training_clips(scene, 12, mode="l2w")
    assert len(clips) == 13
    c = clips[0]
    assert c.n_scene == 6 and len(c) - c.n_scene == 6
    assert c.reference == c.frame_ids[0]


def test_i2p_clips_invariant_to_rigid_motion(scene):
    M = Pose(so3_exp([0.3, -0.4, 1.2]), [5.0, -2.0, 0.5])
    moved = dataclasses.replace(scene, poses=[M.compose(p) for p in scene.poses])
    a = make_training_clips(scene, 5, stride=7)
    b = make_training_clips(moved, 5, stride=7)
    for ca, cb in zip(a, b):
        for pa, pb in zip(ca.gt_pointmaps(), cb.gt_pointmaps()):
            np.testing.assert_allclose(pa.points, pb.points, atol=1e-9)


def test_clip_errors(scene):
    with pytest.raises(TooFewFramesError):
        make_training_clips(scene, 30)
    with pytest.raises(TooFewFramesError):
        make_training_clips(scene, 6, skip=5)
    with pytest.raises(ValueError):
        make_training_clips(scene, 5, mode="video")


def test_clip_stride_and_skip(scene):
    clips = make_training_clips(scene, 3, stride=5, skip=4)
    assert [c.frame_ids for c in clips] == [(0, 4, 8), (5, 9, 13), (10, 14, 18), (15, 19, 23)]


# ------------------------------------------------------------------ training


def _i2p_cfg(**kw):
    base = dict(clip_len=3, batch_size=8, epochs=1, lr=1e-3, seed=0, jitter=0.0, min_frames=3, warmup=1)
    return TrainConfig(**{**base, **kw})


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mix=1.5)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_i2p_zero_epochs_is_noop(small_scenes):
    clips = make_training_clips(small_scenes[0], 3, stride=2)
    model = I2PNet(SMALL, seed=0)
    before = params(model)
    res = train_i2p_toy(model, clips, _i2p_cfg(epochs=0))
    assert same(before, params(model)) and res.curve == []


def test_i2p_single_step_descends(small_scenes):
    clips = make_training_clips(small_scenes[0], 3, stride=2)[:8]
    model = I2PNet(SMALL, seed=0)
    l0 = held_out_i2p_loss(model, clips, batch_size=8)
    train_i2p_toy(model, clips, _i2p_cfg(lr=1e-4, max_batches=1))
    assert held_out_i2p_loss(model, clips, batch_size=8) < l0


def test_i2p_training_reproducible(small_scenes):
    clips = make_training_clips(small_scenes[0], 3, stride=1)
    cfg = _i2p_cfg(epochs=2, jitter=0.1, min_frames=2)
    a, b = I2PNet(SMALL, seed=1), I2PNet(SMALL, seed=1)
    ra = train_i2p_toy(a, clips, cfg)
    rb = train_i2p_toy(b, clips, cfg)
    assert same(params(a), params(b)) and ra.curve == rb.curve
    assert ra.manifest["optimizer"].startswith("Adam")


def test_i2p_divergence_aborts(small_scenes):
    clips = make_training_clips(small_scenes[0], 3, stride=4)
    model = I2PNet(SMALL, seed=0)
    with torch.no_grad():
        model.key_head.proj.weight.fill_(float("nan"))
    with pytest.raises(NumericError):
        train_i2p_toy(model, clips, _i2p_cfg())


def test_keyframe_error_shapes(small_scenes):
    clips = make_training_clips(small_scenes[0], 5, stride=4)
    model = I2PNet(SMALL, seed=0)
    full = keyframe_error(model, clips)
    one = keyframe_error(model, clips, keep=[1, 2])
    assert full.shape == one.shape == (len(clips),)
    assert np.all(np.isfinite(full)) and np.all(full > 0)


def _l2w_cfg(**kw):
    base = dict(clip_len=4, batch_size=4, epochs=1, lr=1e-3, seed=0, warmup=1, mix=0.5)
    return TrainConfig(**{**base, **kw})


def test_l2w_zero_epochs_and_reproducible(small_scenes):
    i2p = I2PNet(SMALL, seed=0)
    clips = make_training_clips(small_scenes[0], 4, stride=3, mode="l2w")
    m = L2WNet(SMALL, seed=0)
    before = params(m)
    train_l2w_toy(m, i2p, clips, _l2w_cfg(epochs=0))
    assert same(before, params(m))
    a, b = L2WNet(SMALL, seed=2), L2WNet(SMALL, seed=2)
    ra = train_l2w_toy(a, i2p, clips, _l2w_cfg(epochs=2))
    rb = train_l2w_toy(b, i2p, clips, _l2w_cfg(epochs=2))
    assert same(params(a), params(b)) and ra.curve == rb.curve


def test_l2w_single_step_descends(small_scenes):
    i2p = I2PNet(SMALL, seed=0)
    clips = make_training_clips(small_scenes[0], 4, stride=3, mode="l2w")[:4]
    cache = FrameCache(i2p)
    cfg = _l2w_cfg(lr=1e-4, max_batches=1, mix=0.0, input_noise=0.0)
    model = L2WNet(SMALL, seed=0)
    batch = l2w_batch(clips, cache, cfg, np.random.default_rng(5), augment=False)
    with torch.no_grad():
        l0 = float(l2w_loss_on(model, batch, cfg.alpha))
    train_l2w_toy(model, i2p, clips, cfg, cache=cache)
    with torch.no_grad():
        assert float(l2w_loss_on(model, batch, cfg.alpha)) < l0


def test_retrieval_training_freezes_backbone(small_scenes):
    i2p = I2PNet(SMALL, seed=0)
    head = RetrievalHead(i2p, r=2, seed=0)
    backbone = params(i2p)
    data = retrieval_pairs(i2p, head, small_scenes, pairs_per_scene=16, max_offset=8)
    proj0 = params(head.proj)
    res = train_retrieval_head(head, i2p, data, TrainConfig(epochs=50, batch_size=8, lr=3e-3, warmup=5))
    assert same(backbone, params(i2p))
    assert not same(proj0, params(head.proj))
    curve = np.asarray(res.curve)
    assert curve[-5:].mean() < curve[:5].mean()
