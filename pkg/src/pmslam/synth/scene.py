"""Procedural box rooms rendered by per-pixel ray casting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, Pose, backproject

ROOM = (np.zeros(3), np.array([4.0, 4.0, 3.0]))
ROOM_DIAMETER = float(np.linalg.norm(ROOM[1] - ROOM[0]))
LIGHT = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])
TILE = 0.25


@dataclass
class SyntheticScene:
    """Boxes inside a 4×4×3 room plus a rendered camera trajectory.

    ``boxes`` is ``(N, 2, 3)`` of (min, max) corners; ``depth`` is z-depth
    per frame (camera axes: x right, y down, z forward); ``poses`` are
    camera-to-world.
    """

    seed: int
    boxes: np.ndarray
    box_colors: np.ndarray
    wall_colors: np.ndarray
    intrinsics: CameraIntrinsics
    poses: list[Pose]
    images: np.ndarray = field(repr=False)
    depth: np.ndarray = field(repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def size(self) -> tuple[int, int]:
        return self.depth.shape[1:3]

    @property
    def diameter(self) -> float:
        return ROOM_DIAMETER

    def world_points(self, i: int):
        return backproject(self.depth[i], self.intrinsics, self.poses[i])

    def surface_distance(self, pts: np.ndarray) -> np.ndarray:
        """Unsigned distance from points to the nearest box face or wall."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        lo, hi = ROOM
        best = np.minimum(pts - lo, hi - pts).min(1)
        best = np.abs(best)
        for b in self.boxes:
            best = np.minimum(best, _box_surface_distance(pts, b[0], b[1]))
        return best


def _box_surface_distance(p, lo, hi):
    c = (lo + hi) / 2
    h = (hi - lo) / 2
    q = np.abs(p - c) - h
    outside = np.linalg.norm(np.maximum(q, 0), axis=1)
    inside = np.minimum(q.max(1), 0)
    return np.abs(outside + inside)


def look_rotation(forward, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation with columns (right, down, forward)."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1)


def _gen_boxes(rng, n):
    boxes, colors = [], []
    while len(boxes) < n:
        size = np.array([rng.uniform(0.25, 0.9), rng.uniform(0.25, 0.9), rng.uniform(0.2, 1.2)])
        pos = np.array([rng.uniform(0.1, 3.9 - size[0]), rng.uniform(0.1, 3.9 - size[1]), 0.0])
        boxes.append(np.stack([pos, pos + size]))
        colors.append(rng.uniform(0.15, 0.95, size=3))
    return np.asarray(boxes), np.asarray(colors)


def gen_trajectory(rng, n_frames: int, arc: float = 1.0) -> list[Pose]:
    """Smooth loop around the room center; ``arc=1`` returns to the start pose.

    Yaw advances by ``2π·arc/n_frames`` per frame plus a slow wobble, so the
    angular velocity stays bounded by about 6°/frame for 64+ frames.
    """
    center = np.array([2.0, 2.0]) + rng.uniform(-0.2, 0.2, size=2)
    a, b = rng.uniform(0.5, 1.0, size=2)
    phase0 = rng.uniform(0, 2 * np.pi)
    h0 = rng.uniform(1.4, 1.7)
    pitch0 = np.deg2rad(rng.uniform(12, 24))
    yaw_off = rng.uniform(-0.5, 0.5)
    k_wobble = int(rng.integers(1, 4))
    direction = rng.choice([-1.0, 1.0])
    poses = []
    for i in range(n_frames):
        s = arc * i / n_frames
        th = phase0 + direction * 2 * np.pi * s
        pos = np.array([center[0] + a * np.cos(th), center[1] + b * np.sin(th), h0 + 0.08 * np.sin(2 * np.pi * k_wobble * s)])
        yaw = th + yaw_off + 0.15 * np.sin(2 * np.pi * k_wobble * s)
        pitch = pitch0 + np.deg2rad(4) * np.sin(2 * np.pi * (k_wobble + 1) * s)
        fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), -np.sin(pitch)])
        poses.append(Pose(look_rotation(fwd), pos))
    return poses


def _albedo_checker(p, normal_axis):
    """0.75/1.0 checker over the two in-plane coordinates of each hit."""
    axes = np.array([[1, 2], [0, 2], [0, 1]])[normal_axis]
    a = np.take_along_axis(p, axes[:, :1], 1)[:, 0]
    b = np.take_along_axis(p, axes[:, 1:], 1)[:, 0]
    parity = (np.floor(a / TILE) + np.floor(b / TILE)) % 2
    return np.where(parity > 0, 0.75, 1.0)


def render(boxes, box_colors, wall_colors, intrinsics: CameraIntrinsics, pose: Pose, size=(64, 64)):
    """Ray-cast one frame; returns ``(image (H,W,3) float32, depth (H,W) float64)``."""
    H, W = size
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    d_cam = np.stack([(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u)], -1).reshape(-1, 3)
    d = d_cam @ pose.rotation.T
    o = pose.translation
    n = len(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        # room interior: exit distance
        lo, hi = ROOM
        t_far = np.where(d > 0, (hi - o) * inv, (lo - o) * inv)
        axis = np.argmin(t_far, 1)
        t = t_far[np.arange(n), axis]
        sign = np.sign(d[np.arange(n), axis])  # outward normal for walls is +dir, we face -dir
        normal = np.zeros((n, 3))
        normal[np.arange(n), axis] = -sign
        wall_id = axis * 2 + (sign > 0)
        color = wall_colors[wall_id]
        for bi, (blo, bhi) in enumerate(boxes):
            t1 = (blo - o) * inv
            t2 = (bhi - o) * inv
            tmin3 = np.minimum(t1, t2)
            tmax3 = np.maximum(t1, t2)
            tmin = tmin3.max(1)
            tmax = tmax3.min(1)
            hit = (tmax >= tmin) & (tmin > 1e-9) & (tmin < t)
            if not hit.any():
                continue
            ax = np.argmax(tmin3[hit], 1)
            t[hit] = tmin[hit]
            nrm = np.zeros((int(hit.sum()), 3))
            nrm[np.arange(len(ax)), ax] = -np.sign(d[hit][np.arange(len(ax)), ax])
            normal[hit] = nrm
            axis[hit] = ax
            color[hit] = box_colors[bi]
    p = o + t[:, None] * d
    shade = 0.35 + 0.65 * np.clip(normal @ LIGHT, 0, None)
    img = color * (_albedo_checker(p, axis) * shade)[:, None]
    return np.clip(img, 0, 1).reshape(H, W, 3).astype(np.float32), t.reshape(H, W)


def gen_scene(seed: int, n_frames: int | None = None, size=(64, 64), arc: float | None = None) -> SyntheticScene:
    """Deterministic room for ``seed``: 5–15 boxes, 64–256 frame camera loop."""
    rng = np.random.default_rng(seed)
    n_boxes = int(rng.integers(5, 16))
    if n_frames is None:
        n_frames = int(rng.integers(64, 257))
    if arc is None:
        arc = 1.0
    boxes, colors = _gen_boxes(rng, n_boxes)
    wall_colors = rng.uniform(0.3, 0.95, size=(6, 3))
    H, W = size
    intr = CameraIntrinsics(0.75 * W, 0.75 * W, (W - 1) / 2, (H - 1) / 2)
    poses = gen_trajectory(rng, n_frames, arc)
    images = np.empty((n_frames, H, W, 3), dtype=np.float32)
    depth = np.empty((n_frames, H, W), dtype=np.float64)
    for i, pose in enumerate(poses):
        images[i], depth[i] = render(boxes, colors, wall_colors, intr, pose, size)
    return SyntheticScene(seed, boxes, colors, wall_colors, intr, poses, images, depth)
