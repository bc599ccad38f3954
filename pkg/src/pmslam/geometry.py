"""Rigid/similarity transforms, back-projection, point-cloud alignment and
pose recovery from pointmaps.

Conventions: cameras follow the OpenCV axes (x right, y down, z forward);
``Pose`` is camera-to-world; pixel ``(u, v)`` is (column, row).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateConfigurationError,
    EmptyInputError,
    InsufficientCorrespondencesError,
    InvalidIntrinsicsError,
    PoseFailureError,
    ShapeError,
)

_ORTHO_TOL = 1e-9
BRUTE_FORCE_BELOW = 256


def _check_rotation(R: np.ndarray, tol: float = _ORTHO_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ShapeError(f"rotation must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0) or np.linalg.det(R) < 0:
        raise ValueError("rotation is not a proper orthonormal matrix")
    return R


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest proper rotation to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ D @ Vt


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    return rotation_about(w / theta, theta)


def rotation_angle(R: np.ndarray) -> float:
    """Angle (radians) of the rotation ``R``."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class Sim3:
    """``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation, 1e-6))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> Sim3:
        return cls()

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self) -> Sim3:
        Rt = self.rotation.T
        return Sim3(Rt, -(Rt @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, other: Sim3) -> Sim3:
        """``self ∘ other`` (apply ``other`` first)."""
        return Sim3(
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
            self.scale * other.scale,
        )

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: Pose) -> Pose:
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    @classmethod
    def from_matrix(cls, M) -> Pose:
        M = np.asarray(M, dtype=np.float64)
        return cls(project_to_rotation(M[:3, :3]), M[:3, 3])

    def to_line(self) -> str:
        return " ".join(repr(float(v)) for v in self.matrix34().ravel())

    @classmethod
    def from_line(cls, line: str) -> Pose:
        vals = [float(v) for v in line.split()]
        if len(vals) != 12:
            raise ShapeError(f"pose line needs 12 values, got {len(vals)}")
        M = np.asarray(vals).reshape(3, 4)
        return cls(M[:, :3], M[:, 3])


def write_poses(path, poses) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in poses:
            f.write(p.to_line() + "\n")


def read_poses(path) -> list[Pose]:
    with open(path, encoding="utf-8") as f:
        return [Pose.from_line(line) for line in f if line.strip()]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidIntrinsicsError(f"focal lengths must be positive: fx={self.fx}, fy={self.fy}")

    def check_image(self, height: int, width: int) -> None:
        if not (0 < self.cx < width and 0 < self.cy < height):
            raise InvalidIntrinsicsError(
                f"principal point ({self.cx}, {self.cy}) outside {width}x{height} image"
            )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def cropped(self, top: int, left: int) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx - left, self.cy - top)


@dataclass(frozen=True)
class Pointmap:
    """H×W grid of 3D points with a validity mask.

    Invalid entries are stored as zeros and never enter reductions.
    """

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if pts.ndim != 3 or pts.shape[-1] != 3 or valid.shape != pts.shape[:2]:
            raise ShapeError(f"bad pointmap shapes {pts.shape} / {valid.shape}")
        if not np.isfinite(pts[valid]).all():
            raise ValueError("valid pointmap entries must be finite")
        pts = np.where(valid[..., None], pts, 0.0)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def full(cls, points) -> Pointmap:
        points = np.asarray(points, dtype=np.float64)
        return cls(points, np.ones(points.shape[:2], dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def transformed(self, T) -> Pointmap:
        return Pointmap(T.apply(self.points.reshape(-1, 3)).reshape(self.points.shape), self.valid)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0:height, 0:width]
    return u.astype(np.float64), v.astype(np.float64)


def backproject(depth, intrinsics: CameraIntrinsics, pose: Pose | None = None) -> Pointmap:
    """Lift a z-depth map to world points; non-positive depths are invalid."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ShapeError(f"depth must be HxW, got {depth.shape}")
    if not (intrinsics.fx > 0 and intrinsics.fy > 0):
        raise InvalidIntrinsicsError("non-positive focal length")
    H, W = depth.shape
    u, v = pixel_grid(H, W)
    valid = np.isfinite(depth) & (depth > 0)
    d = np.where(valid, depth, 0.0)
    cam = np.stack([(u - intrinsics.cx) / intrinsics.fx * d, (v - intrinsics.cy) / intrinsics.fy * d, d], axis=-1)
    if pose is not None:
        cam = pose.apply(cam.reshape(-1, 3)).reshape(H, W, 3)
    return Pointmap(cam, valid)


def umeyama_align(src, dst, with_scale: bool = True) -> Sim3:
    """Least-squares similarity ``dst ≈ s R src + t`` (Umeyama 1991)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ShapeError(f"point count mismatch {src.shape} vs {dst.shape}")
    n = len(src)
    if n < 3:
        raise DegenerateConfigurationError(f"need at least 3 point pairs, got {n}")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateConfigurationError("source points are collinear or coincident")
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs**2).sum() / n
        s = float(np.trace(np.diag(D) @ S) / var_s)
        if not s > 0:
            raise DegenerateConfigurationError("non-positive scale estimate")
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return Sim3(R, t, s)


def nearest_neighbors(query, ref, tree: cKDTree | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Nearest ``ref`` point for every ``query`` point: ``(distances, indices)``.

    Uses a KD-tree unless ``ref`` has fewer than 256 points. Distances are
    recomputed from the coordinates with one fixed formula so both search
    paths return bitwise-identical values for the same neighbor.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    if len(ref) == 0:
        raise EmptyInputError("empty reference cloud")
    if len(query) == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    if tree is None and len(ref) < BRUTE_FORCE_BELOW:
        idx = brute_force_nearest(query, ref)
    else:
        if tree is None:
            tree = cKDTree(ref)
        _, idx = tree.query(query, k=1)
        idx = np.asarray(idx, dtype=np.int64)
    return point_distance(query, ref[idx]), idx


def point_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def brute_force_nearest(query: np.ndarray, ref: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(query), dtype=np.int64)
    for s in range(0, len(query), chunk):
        q = query[s : s + chunk]
        d = point_distance(q[:, None, :], ref[None, :, :])
        out[s : s + chunk] = d.argmin(1)
    return out


class ICPResult(NamedTuple):
    transform: Sim3
    rms: float
    iterations: int
    history: list


def icp_refine(
    src_cloud,
    dst_cloud,
    init: Sim3 | None = None,
    max_iter: int = 50,
    tol: float = 1e-6,
    with_scale: bool = False,
    return_details: bool = False,
):
    """Point-to-point ICP seeded with ``init``.

    Each iteration matches every transformed source point to its nearest
    destination point and re-solves the transform with :func:`umeyama_align`.
    Iterations that would increase the mean squared correspondence distance
    are rejected, so the returned objective never exceeds the one at ``init``.
    Stops when the RMS changes by less than ``tol`` (relative to the current
    RMS, or absolutely once the RMS itself is below ``tol``).
    """
    src = np.asarray(src_cloud, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst_cloud, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise EmptyInputError("ICP needs two non-empty clouds")
    T = init if init is not None else Sim3.identity()
    tree = cKDTree(dst) if len(dst) >= BRUTE_FORCE_BELOW else None

    def objective(T):
        d, idx = nearest_neighbors(T.apply(src), dst, tree)
        return float(np.mean(d * d)), idx

    err, idx = objective(T)
    history = [np.sqrt(err)]
    it = 0
    for it in range(1, max_iter + 1):
        try:
            cand = umeyama_align(src, dst[idx], with_scale=with_scale)
        except DegenerateConfigurationError:
            it -= 1
            break
        cand_err, cand_idx = objective(cand)
        if cand_err > err:
            it -= 1
            break
        prev = np.sqrt(err)
        T, err, idx = cand, cand_err, cand_idx
        rms = np.sqrt(err)
        history.append(rms)
        if abs(prev - rms) < tol * max(rms, 1.0) or rms < tol:
            break
    rms = float(np.sqrt(err))
    if return_details:
        return ICPResult(T, rms, it, history)
    return T


SAMPLE_PLANAR_TOL = 0.05


class PnPResult(NamedTuple):
    pose: Pose
    rms: float
    inliers: np.ndarray


def _project(R, t, X):
    Xc = X @ R.T + t
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return Xc[:, :2] / z[:, None], z


def _dlt_pose(X: np.ndarray, xn: np.ndarray):
    """World-to-camera (R, t) from >= 6 non-coplanar points via normalized DLT."""
    mu = X.mean(0)
    sc = np.sqrt(((X - mu) ** 2).sum(1).mean()) or 1.0
    Xh = np.hstack([(X - mu) / sc, np.ones((len(X), 1))])
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:2] * Xh
    _, _, Vt = np.linalg.svd(A)
    P = Vt[-1].reshape(3, 4)
    if np.linalg.det(P[:, :3]) < 0:
        P = -P
    M, p = P[:, :3], P[:, 3]
    U, S, Vt2 = np.linalg.svd(M)
    lam = S.mean()
    if not lam > 0:
        return None
    R = U @ Vt2
    t = p / lam
    # normalized world: Xc / sc = R (X - mu) / sc + t
    return R, sc * t - R @ mu


def _plane_basis(X: np.ndarray):
    mu = X.mean(0)
    _, s, Vt = np.linalg.svd(X - mu)
    if np.linalg.det(Vt) < 0:  # keep the basis a proper rotation
        Vt[2] = -Vt[2]
    return mu, Vt, s


def _homography_pose(X: np.ndarray, xn: np.ndarray, mu: np.ndarray, B: np.ndarray):
    """World-to-camera (R, t) from >= 4 coplanar points via the plane homography."""
    ab = (X - mu) @ B[:2].T
    n = len(X)
    A = np.zeros((2 * n, 9))
    ones = np.ones(n)
    P = np.stack([ab[:, 0], ab[:, 1], ones], 1)
    A[0::2, 0:3] = P
    A[0::2, 6:9] = -xn[:, :1] * P
    A[1::2, 3:6] = P
    A[1::2, 6:9] = -xn[:, 1:2] * P
    _, _, Vt = np.linalg.svd(A)
    H = Vt[-1].reshape(3, 3)
    norm = 0.5 * (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
    if norm <= 0:
        return None
    H = H / norm
    if H[2, 2] < 0:  # plane origin must be in front of the camera
        H = -H
    r1, r2, tp = H[:, 0], H[:, 1], H[:, 2]
    Rp = project_to_rotation(np.stack([r1, r2, np.cross(r1, r2)], 1))
    # plane coords -> world: X = mu + B^T [a, b, c]
    R = Rp @ B
    t = tp - R @ mu
    return R, t


def _gauss_newton(R, t, X, uv, K, iters=15):
    fx, fy, cx, cy = K
    for _ in range(iters):
        Xc = X @ R.T + t
        z = Xc[:, 2]
        if np.any(z <= 1e-12):
            break
        x, y = Xc[:, 0] / z, Xc[:, 1] / z
        r = np.concatenate([fx * x + cx - uv[:, 0], fy * y + cy - uv[:, 1]])
        n = len(X)
        # d(proj)/d(Xc)
        J_u = np.stack([fx / z, np.zeros(n), -fx * x / z], 1)
        J_v = np.stack([np.zeros(n), fy / z, -fy * y / z], 1)
        # left perturbation: Xc' = exp(w) Xc + dt -> dXc/dw = -[Xc]x
        def block(Jp):
            dw = np.cross(Xc, Jp)  # Jp @ (-[Xc]x) == Xc x Jp
            return np.hstack([dw, Jp])

        J = np.vstack([block(J_u), block(J_v)])
        H = J.T @ J
        g = J.T @ r
        try:
            delta = -np.linalg.solve(H + 1e-12 * np.eye(6) * np.trace(H), g)
        except np.linalg.LinAlgError:
            break
        dR = so3_exp(delta[:3])
        R = dR @ R
        t = dR @ t + delta[3:]
        if np.linalg.norm(delta) < 1e-14:
            break
    return project_to_rotation(R), t


def _reproj_err(R, t, X, uv, K):
    fx, fy, cx, cy = K
    xy, z = _project(R, t, X)
    e = np.hypot(fx * xy[:, 0] + cx - uv[:, 0], fy * xy[:, 1] + cy - uv[:, 1])
    e[~(z > 0)] = np.inf
    return e


def derive_pose(
    pointmap: Pointmap,
    intrinsics: CameraIntrinsics,
    ransac_iters: int = 200,
    inlier_px: float = 2.0,
    rng: np.random.Generator | int | None = 0,
    planar_tol: float = 1e-3,
) -> PnPResult:
    """Recover the camera-to-world pose that produced a world-frame pointmap.

    Every valid pixel ``(u, v)`` is a 2D-3D correspondence. Hypotheses come
    from minimal samples (6-point DLT, or a 4-point plane homography when the
    whole point set is planar), are scored by reprojection inliers, and the
    best one is refined by Gauss-Newton on its inliers.
    """
    X = pointmap.points[pointmap.valid]
    n = len(X)
    if n < 6:
        raise InsufficientCorrespondencesError(f"need >= 6 valid points, got {n}")
    H, W = pointmap.shape
    u, v = pixel_grid(H, W)
    uv = np.stack([u[pointmap.valid], v[pointmap.valid]], 1)
    K = (intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy)
    xn = np.stack([(uv[:, 0] - K[2]) / K[0], (uv[:, 1] - K[3]) / K[1]], 1)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    mu, B, s = _plane_basis(X)
    planar = s[2] <= planar_tol * s[0]
    sample = 4 if planar else 6

    best = None
    best_count = -1
    for _ in range(max(1, ransac_iters)):
        idx = rng.choice(n, size=sample, replace=False)
        try:
            if planar:
                hyp = _homography_pose(X[idx], xn[idx], mu, B)
            else:
                # scenes dominated by one wall give mostly coplanar samples,
                # where the DLT is degenerate; fit their plane instead
                mu_s, B_s, s_s = _plane_basis(X[idx])
                if s_s[2] <= SAMPLE_PLANAR_TOL * s_s[0]:
                    hyp = _homography_pose(X[idx], xn[idx], mu_s, B_s)
                else:
                    hyp = _dlt_pose(X[idx], xn[idx])
        except np.linalg.LinAlgError:
            continue
        if hyp is None:
            continue
        R, t = hyp
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            continue
        count = int((_reproj_err(R, t, X, uv, K) < inlier_px).sum())
        if count > best_count:
            best, best_count = (R, t), count
            if count == n:
                break
    if best is None or best_count < 6:
        raise PoseFailureError(f"no hypothesis with >= 6 inliers (best {max(best_count, 0)})")
    R, t = best
    inl = _reproj_err(R, t, X, uv, K) < inlier_px
    for _ in range(3):
        R, t = _gauss_newton(R, t, X[inl], uv[inl], K)
        new_inl = _reproj_err(R, t, X, uv, K) < inlier_px
        if new_inl.sum() < 6 or np.array_equal(new_inl, inl):
            break
        inl = new_inl
    e = _reproj_err(R, t, X[inl], uv[inl], K)
    rms = float(np.sqrt(np.mean(e**2)))
    # (R, t) maps world -> camera; report camera -> world
    return PnPResult(Pose(R, t).inverse(), rms, inl)
