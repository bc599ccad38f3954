"""Reconstruction metrics: accuracy, completeness, ATE-RMSE, FPS."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfigurationError, EmptyInputError, ShapeError
from .geometry import (
    Pose,
    Sim3,
    backproject,
    icp_refine,
    nearest_neighbors,
    umeyama_align,
)

DEFAULT_CAP = 200_000


def _cloud(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise EmptyInputError(f"{name} cloud is empty")
    return x


def accuracy(pred, gt) -> float:
    """Mean distance from each predicted point to its nearest ground-truth point."""
    pred, gt = _cloud(pred, "predicted"), _cloud(gt, "ground-truth")
    return float(nearest_neighbors(pred, gt)[0].mean())


def completeness(pred, gt) -> float:
    """Mean distance from each ground-truth point to its nearest predicted point."""
    pred, gt = _cloud(pred, "predicted"), _cloud(gt, "ground-truth")
    return float(nearest_neighbors(gt, pred)[0].mean())


def _centers(traj) -> np.ndarray:
    if len(traj) and isinstance(traj[0], Pose):
        return np.array([p.center for p in traj])
    return np.asarray(traj, dtype=np.float64).reshape(-1, 3)


def ate_rmse(pred_traj, gt_traj) -> float:
    """Root-mean-square camera-center error; trajectories must already be aligned."""
    a, b = _centers(pred_traj), _centers(gt_traj)
    if len(a) != len(b):
        raise ShapeError(f"trajectory lengths differ: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise EmptyInputError("empty trajectory")
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def align_trajectory(pred_traj, gt_traj) -> Sim3:
    """Similarity mapping predicted camera centers onto ground truth."""
    return umeyama_align(_centers(pred_traj), _centers(gt_traj), with_scale=True)


def aligned_ate(pred_traj, gt_traj) -> float:
    T = align_trajectory(pred_traj, gt_traj)
    return ate_rmse(T.apply(_centers(pred_traj)), _centers(gt_traj))


def build_gt_cloud(depths, intrinsics, poses, return_index: bool = False):
    """Union of every frame's back-projected valid pixels (no deduplication).

    With ``return_index`` also returns ``(frame_id, pixel_index)`` per point.
    """
    if len(depths) != len(poses):
        raise ShapeError(f"{len(depths)} depth maps vs {len(poses)} poses")
    pts, fids, pix = [], [], []
    for i, (d, pose) in enumerate(zip(depths, poses)):
        pm = backproject(d, intrinsics, pose)
        idx = np.flatnonzero(pm.valid.ravel())
        pts.append(pm.points.reshape(-1, 3)[idx])
        fids.append(np.full(len(idx), i, dtype=np.int64))
        pix.append(idx)
    cloud = np.concatenate(pts) if pts else np.zeros((0, 3))
    if return_index:
        return cloud, np.concatenate(fids), np.concatenate(pix)
    return cloud


def correspondences(pred_frames, pred_pixels, gt_frames, gt_pixels) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs of points that come from the same (frame, pixel)."""
    stride = int(max(np.max(pred_pixels, initial=0), np.max(gt_pixels, initial=0))) + 1
    kp = np.asarray(pred_frames, dtype=np.int64) * stride + np.asarray(pred_pixels, dtype=np.int64)
    kg = np.asarray(gt_frames, dtype=np.int64) * stride + np.asarray(gt_pixels, dtype=np.int64)
    _, pi, gi = np.intersect1d(kp, kg, assume_unique=True, return_indices=True)
    return pi, gi


def _subsample(n: int, cap: int, rng) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.sort(rng.choice(n, cap, replace=False))


def _pca_frame(x):
    mu = x.mean(0)
    c = x - mu
    scale = float(np.sqrt((c**2).sum(1).mean()))
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    return mu, scale, vt


def _mutual_pairs(a, b, tree_b):
    _, ab = nearest_neighbors(a, b, tree_b)
    _, ba = nearest_neighbors(b, a)
    ok = ba[ab] == np.arange(len(a))
    return np.flatnonzero(ok), ab[ok]


def _coarse_without_correspondences(src, dst, sample_n, rng) -> Sim3:
    """Normalize both clouds, try the four proper principal-axis sign flips,
    refine each with Umeyama on mutually nearest pairs, keep the best."""
    s = src[_subsample(len(src), sample_n, rng)]
    d = dst[_subsample(len(dst), sample_n, rng)]
    mu_s, sc_s, v_s = _pca_frame(s)
    mu_d, sc_d, v_d = _pca_frame(d)
    if sc_s == 0 or sc_d == 0:
        raise DegenerateConfigurationError("cloud collapsed to a point")
    tree = cKDTree(d)
    best, best_err = None, np.inf
    for signs in ([1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]):
        R = v_d.T @ np.diag(signs) @ v_s
        if np.linalg.det(R) < 0:
            R = v_d.T @ np.diag(signs) @ np.diag([1, 1, -1]) @ v_s
        T = Sim3(R, mu_d - (sc_d / sc_s) * R @ mu_s, sc_d / sc_s)
        si, di = _mutual_pairs(T.apply(s), d, tree)
        if len(si) >= 3:
            try:
                T = umeyama_align(s[si], d[di], with_scale=True)
            except DegenerateConfigurationError:
                pass
        err = float(nearest_neighbors(T.apply(s), d, tree)[0].mean())
        if err < best_err:
            best, best_err = T, err
    return best


def align_for_eval(
    pred,
    gt,
    sample_n: int = 5000,
    max_iter: int = 50,
    tol: float = 1e-6,
    pairs: tuple[np.ndarray, np.ndarray] | None = None,
    seed: int = 0,
) -> Sim3:
    """Similarity that maps the prediction onto ground truth.

    Coarse stage: Umeyama on up to ``sample_n`` corresponding pairs when
    ``pairs`` (pred indices, gt indices) are known, otherwise on mutually
    nearest pairs after a normalized principal-axes initialization. Fine
    stage: ICP with scale, from a ``sample_n`` subsample of the prediction
    against the whole ground-truth cloud.
    """
    pred, gt = _cloud(pred, "predicted"), _cloud(gt, "ground-truth")
    if len(pred) < 3 or len(gt) < 3:
        raise DegenerateConfigurationError("alignment needs at least 3 points per cloud")
    sample_n = max(3, min(int(sample_n), len(pred), len(gt)))
    rng = np.random.default_rng(seed)
    if pairs is not None and len(pairs[0]) >= 3:
        pi, gi = pairs
        sel = _subsample(len(pi), sample_n, rng)
        coarse = umeyama_align(pred[pi[sel]], gt[gi[sel]], with_scale=True)
    else:
        coarse = _coarse_without_correspondences(pred, gt, sample_n, rng)
    src = pred[_subsample(len(pred), sample_n, rng)]
    return icp_refine(src, gt, init=coarse, max_iter=max_iter, tol=tol, with_scale=True)


def fps(frame_count: int, elapsed_seconds: float) -> float:
    if not elapsed_seconds > 0:
        raise ValueError(f"elapsed time must be positive, got {elapsed_seconds}")
    return frame_count / elapsed_seconds


@dataclass
class EvalReport:
    accuracy: float
    completeness: float
    ate_rmse: float | None
    fps: float | None
    n_pred: int
    n_gt: int
    alignment: Sim3 = field(default_factory=Sim3.identity)
    subsample_cap: int | None = DEFAULT_CAP

    def as_dict(self) -> dict:
        a = self.alignment
        return {
            "accuracy": self.accuracy,
            "completeness": self.completeness,
            "ate_rmse": self.ate_rmse,
            "fps": self.fps,
            "P": self.n_pred,
            "Q": self.n_gt,
            "align_scale": a.scale,
            "align_rotation": a.rotation.ravel().tolist(),
            "align_translation": a.translation.tolist(),
            "subsample_cap": self.subsample_cap,
        }

    def to_text(self) -> str:
        def fmt(v):
            if isinstance(v, list):
                return " ".join(repr(float(x)) for x in v)
            return "none" if v is None else str(v)

        return "".join(f"{k}={fmt(v)}\n" for k, v in self.as_dict().items())

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())


def evaluate(
    pred,
    gt,
    pred_index: tuple[Sequence[int], Sequence[int]] | None = None,
    gt_index: tuple[Sequence[int], Sequence[int]] | None = None,
    pred_traj=None,
    gt_traj=None,
    frame_count: int | None = None,
    elapsed: float | None = None,
    cap: int | None = DEFAULT_CAP,
    sample_n: int = 5000,
    max_iter: int = 50,
    tol: float = 1e-6,
    seed: int = 0,
) -> EvalReport:
    """Align ``pred`` to ``gt`` and compute every metric.

    ``pred_index``/``gt_index`` give (frame id, pixel index) per point and
    enable correspondence-based coarse alignment. ``cap`` bounds both
    clouds by uniform subsampling before nearest-neighbor queries.
    """
    pred, gt = _cloud(pred, "predicted"), _cloud(gt, "ground-truth")
    rng = np.random.default_rng(seed)
    pairs = None
    if pred_index is not None and gt_index is not None:
        pairs = correspondences(*pred_index, *gt_index)
    T = align_for_eval(pred, gt, sample_n, max_iter, tol, pairs, seed)
    aligned = T.apply(pred)
    if cap is not None:
        aligned = aligned[_subsample(len(aligned), cap, rng)]
        gt_m = gt[_subsample(len(gt), cap, rng)]
    else:
        gt_m = gt
    ate = None
    if pred_traj is not None and gt_traj is not None:
        ate = aligned_ate(pred_traj, gt_traj)
    rate = fps(frame_count, elapsed) if frame_count is not None and elapsed is not None else None
    return EvalReport(accuracy(aligned, gt_m), completeness(aligned, gt_m), ate, rate, len(pred), len(gt), T, cap)
