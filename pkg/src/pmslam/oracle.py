"""Stand-in networks: ground truth plus noise, and constant-time stubs."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .geometry import CameraIntrinsics, Pointmap, Pose, backproject, umeyama_align
from .pipeline import Keyframe, LocalPrediction, Window

ORACLE_CONF = 10.0


class GroundTruth:
    """Per-frame depth, poses and intrinsics with cached world pointmaps."""

    def __init__(self, depth, poses: Sequence[Pose], intrinsics: CameraIntrinsics):
        self.depth = np.asarray(depth)
        self.poses = list(poses)
        self.intrinsics = intrinsics
        self._world: dict[int, Pointmap] = {}

    @classmethod
    def from_scene(cls, scene) -> GroundTruth:
        return cls(scene.depth, scene.poses, scene.intrinsics)

    def world(self, i: int) -> Pointmap:
        if i not in self._world:
            self._world[i] = backproject(self.depth[i], self.intrinsics, self.poses[i])
        return self._world[i]

    def local(self, i: int, ref: int) -> Pointmap:
        return self.world(i).transformed(self.poses[ref].inverse())


def _noisy(pm: Pointmap, sigma: float, rng) -> Pointmap:
    if sigma == 0:
        return pm
    return Pointmap(pm.points + rng.normal(0.0, sigma, pm.points.shape), pm.valid)


class OracleI2P:
    """Exact keyframe-frame pointmaps with isotropic Gaussian noise ``sigma``."""

    def __init__(self, gt: GroundTruth, sigma: float = 0.0, seed: int = 0, conf: float = ORACLE_CONF):
        self.gt, self.sigma, self.seed, self.conf = gt, sigma, seed, conf

    def run(self, frames, window: Window) -> LocalPrediction:
        rng = np.random.default_rng([self.seed, window.key_id, window.key_index])
        key = window.key_id
        pms = [_noisy(self.gt.local(i, key), self.sigma, rng) for i in window.frame_ids]
        conf = np.full((len(pms), *pms[0].shape), self.conf)
        return LocalPrediction(pms, conf, list(window.frame_ids), window.frame_ids, window.key_index)


class OracleL2W:
    """Registers keyframes with the similarity that maps ground truth onto the scene frames.

    The transform is fitted by Umeyama between each scene frame's true world
    points and its stored pipeline-world points, so errors in the scene
    frames propagate exactly as they would for a learned registration.
    """

    def __init__(self, gt: GroundTruth, sigma: float = 0.0, seed: int = 0, conf: float = ORACLE_CONF, sample_step: int = 7):
        self.gt, self.sigma, self.seed, self.conf = gt, sigma, seed, conf
        self.sample_step = sample_step

    def register(self, keyframes: Sequence[Keyframe], scene_frames):
        src, dst = [], []
        for sf in scene_frames:
            m = sf.global_points.valid & self.gt.world(sf.id).valid
            src.append(self.gt.world(sf.id).points[m][:: self.sample_step])
            dst.append(sf.global_points.points[m][:: self.sample_step])
        T = umeyama_align(np.concatenate(src), np.concatenate(dst), with_scale=True)
        out = []
        for kf in keyframes:
            rng = np.random.default_rng([self.seed, 1, kf.id])
            pm = _noisy(self.gt.world(kf.id).transformed(T), self.sigma * T.scale, rng)
            out.append((pm, np.full(pm.shape, self.conf)))
        return out


def oracle_scorer(gt: GroundTruth):
    """Score = 1 / (1 + camera-center distance); features are frame ids."""

    def score(key_feature, entries):
        c = gt.poses[int(key_feature)].center
        return [(e.id, 1.0 / (1.0 + float(np.linalg.norm(gt.poses[e.id].center - c)))) for e in entries]

    return score


class StubI2P:
    """Returns the same prediction for every window."""

    def __init__(self, size=(64, 64), depth: float = 1.0):
        self.size = size
        H, W = size
        intr = CameraIntrinsics(0.75 * W, 0.75 * W, (W - 1) / 2, (H - 1) / 2)
        self.pm = backproject(np.full(size, depth), intr)
        self.conf = np.full(size, ORACLE_CONF)
        self._cache: dict[int, tuple] = {}

    def run(self, frames, window: Window) -> LocalPrediction:
        n = len(window)
        if n not in self._cache:
            self._cache[n] = ([self.pm] * n, np.broadcast_to(self.conf, (n, *self.size)))
        pms, conf = self._cache[n]
        return LocalPrediction(pms, conf, list(window.frame_ids), window.frame_ids, window.key_index)


class StubL2W:
    def __init__(self, size=(64, 64)):
        self.out = (StubI2P(size).pm, np.full(size, ORACLE_CONF))

    def register(self, keyframes, scene_frames):
        return [self.out for _ in keyframes]


def stub_scorer(key_feature, entries):
    return [(e.id, 1.0 / (2.0 + abs(e.id - int(key_feature)))) for e in entries]
