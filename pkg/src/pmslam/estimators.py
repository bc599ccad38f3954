"""scikit-learn style wrappers around alignment and reconstruction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ShapeError
from .geometry import CameraIntrinsics, icp_refine, umeyama_align


def check_points(X, name: str = "X", min_rows: int = 1) -> np.ndarray:
    """Coerce to a finite ``(N, 3)`` float64 array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ShapeError(f"{name} must have shape (N, 3), got {X.shape}")
    if len(X) < min_rows:
        raise ShapeError(f"{name} needs at least {min_rows} rows, got {len(X)}")
    if not np.all(np.isfinite(X)):
        raise ShapeError(f"{name} contains non-finite values")
    return X


def check_frames(frames) -> np.ndarray:
    """Coerce to ``(F, H, W, 3)`` float32 images in [0, 1]."""
    f = np.asarray(frames)
    if f.ndim != 4 or f.shape[-1] != 3:
        raise ShapeError(f"frames must have shape (F, H, W, 3), got {f.shape}")
    if f.dtype == np.uint8:
        return f.astype(np.float32) / 255.0
    return f.astype(np.float32)


class SimilarityAligner(TransformerMixin, BaseEstimator):
    """Fits the similarity taking points ``X`` onto ``y``.

    With ``paired=True`` row ``i`` of ``X`` corresponds to row ``i`` of ``y``
    and the fit is closed-form; ``refine=True`` then polishes it with ICP.
    Unpaired clouds are always aligned by ICP from the identity.
    """

    def __init__(self, with_scale=True, paired=True, refine=False, max_iter=50, tol=1e-6):
        self.with_scale = with_scale
        self.paired = paired
        self.refine = refine
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X = check_points(X, "X", 3)
        y = check_points(y, "y", 3)
        init = None
        if self.paired:
            if len(X) != len(y):
                raise ShapeError(f"paired fit needs equal lengths, got {len(X)} and {len(y)}")
            init = umeyama_align(X, y, self.with_scale)
        if self.paired and not self.refine:
            self.transform_ = init
        else:
            self.transform_ = icp_refine(X, y, init=init, max_iter=self.max_iter, tol=self.tol, with_scale=self.with_scale)
        self.scale_ = self.transform_.scale
        self.rotation_ = self.transform_.rotation
        self.translation_ = self.transform_.translation
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.apply(check_points(X))

    def inverse_transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.inverse().apply(check_points(X))


class Reconstructor(RegressorMixin, BaseEstimator):
    """Runs the incremental pipeline on a frame sequence.

    ``fit(frames)`` reconstructs; the cloud lands in ``points_``, per-point
    confidence in ``confidence_`` and source frames in ``frame_ids_``.
    ``predict`` returns the cloud again; ``score(frames, gt_cloud)`` is the
    negated mean of accuracy and completeness after evaluation alignment.
    """

    def __init__(self, i2p=None, l2w=None, scorer=None, config=None, intrinsics=None, overlap=False):
        self.i2p = i2p
        self.l2w = l2w
        self.scorer = scorer
        self.config = config
        self.intrinsics = intrinsics
        self.overlap = overlap

    def fit(self, frames, y=None):
        from .pipeline import PipelineConfig, run

        frames = check_frames(frames)
        if self.i2p is None or self.l2w is None:
            raise ValueError("Reconstructor needs i2p and l2w adapters")
        cfg = self.config if self.config is not None else PipelineConfig()
        intr = self.intrinsics
        if intr is not None and not isinstance(intr, CameraIntrinsics):
            intr = CameraIntrinsics(*intr)
        self.result_ = run(self.i2p, self.l2w, self.scorer, frames, cfg, intr, overlap=self.overlap)
        scene = self.result_.scene
        self.points_ = scene.points
        self.confidence_ = scene.confidence
        self.frame_ids_ = scene.frame_ids
        self.fps_ = self.result_.fps
        return self

    def predict(self, frames=None):
        check_is_fitted(self, "points_")
        return self.points_

    def score(self, frames, y, sample_weight=None):
        from .eval import evaluate

        check_is_fitted(self, "points_")
        rep = evaluate(self.points_, check_points(y, "y", 3))
        return -(rep.accuracy + rep.completeness) / 2
