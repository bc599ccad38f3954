"""Benchmark sequences (PNG/JPEG rasters, 4x4 pose matrices) to the PPM/PFM dataset layout."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError
from .geometry import CameraIntrinsics, Pose
from .io import save_dataset

# (fx, fy, cx, cy) at native resolution
SEVEN_SCENES_INTRINSICS = (585.0, 585.0, 320.0, 240.0)
REPLICA_INTRINSICS = (600.0, 600.0, 599.5, 339.5)
REPLICA_DEPTH_SCALE = 6553.5


def _pose(matrix, path) -> Pose:
    m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
    if not np.all(np.isfinite(m)):
        raise DatasetError(path, "pose contains non-finite values", None)
    return Pose.from_matrix(m[:3])


def _depth(path, scale: float, invalid: int | None = None) -> np.ndarray:
    raw = np.asarray(Image.open(path), dtype=np.float64)
    d = raw / scale
    d[raw == 0] = 0.0
    if invalid is not None:
        d[raw == invalid] = 0.0
    return d.astype(np.float32)


def _rgb(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def _select(items, limit, step):
    items = items[::step]
    return items[:limit] if limit else items


def _write(out, images, depths, poses, intrinsics) -> int:
    if len(images) < 2:
        raise DatasetError(out, f"need at least 2 frames, found {len(images)}", None)
    save_dataset(out, images, CameraIntrinsics(*intrinsics), np.stack(depths), poses, units="meters")
    return len(images)


def convert_7scenes(src, out, intrinsics=None, limit=None, step: int = 1) -> int:
    """One ``seq-XX`` folder: ``frame-NNNNNN.{color.png,depth.png,pose.txt}``.

    Depth is millimeters with 65535 marking holes.
    """
    src = Path(src)
    colors = _select(sorted(src.glob("frame-*.color.png")), limit, step)
    if not colors:
        raise DatasetError(src, "no frame-*.color.png files", None)
    images, depths, poses = [], [], []
    for c in colors:
        stem = c.name[: -len(".color.png")]
        dpath, ppath = src / f"{stem}.depth.png", src / f"{stem}.pose.txt"
        for p in (dpath, ppath):
            if not p.is_file():
                raise DatasetError(p, "missing companion file", None)
        images.append(_rgb(c))
        depths.append(_depth(dpath, 1000.0, invalid=65535))
        poses.append(_pose(np.loadtxt(ppath), ppath))
    return _write(out, images, depths, poses, intrinsics or SEVEN_SCENES_INTRINSICS)


def convert_replica(src, out, intrinsics=None, limit=None, step: int = 1) -> int:
    """``results/frameNNNNNN.jpg``, ``results/depthNNNNNN.png`` and ``traj.txt``
    (one row-major 4x4 camera-to-world matrix per line)."""
    src = Path(src)
    traj_path = src / "traj.txt"
    if not traj_path.is_file():
        raise DatasetError(traj_path, "missing trajectory", None)
    rows = np.loadtxt(traj_path).reshape(-1, 16)
    frames = sorted((src / "results").glob("frame*.jpg"))
    if len(frames) != len(rows):
        raise DatasetError(traj_path, f"{len(rows)} poses for {len(frames)} images", None)
    idx = _select(list(range(len(frames))), limit, step)
    images, depths, poses = [], [], []
    for i in idx:
        f = frames[i]
        dpath = f.with_name("depth" + f.name[len("frame") :]).with_suffix(".png")
        if not dpath.is_file():
            raise DatasetError(dpath, "missing depth", None)
        images.append(_rgb(f))
        depths.append(_depth(dpath, REPLICA_DEPTH_SCALE))
        poses.append(_pose(rows[i], traj_path))
    return _write(out, images, depths, poses, intrinsics or REPLICA_INTRINSICS)


CONVERTERS = {"7scenes": convert_7scenes, "replica": convert_replica}
