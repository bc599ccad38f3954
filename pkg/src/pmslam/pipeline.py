"""Sliding windows, scene initialization and incremental registration.

Networks are reached through small adapters so the same loop drives the
trained models, ground-truth oracles and constant-time stubs:

* an I2P adapter has ``run(frames, window) -> LocalPrediction``;
* an L2W adapter has ``register(keyframes, scene_frames) -> [(points, conf)]``
  where each keyframe is a :class:`Keyframe`;
* a scorer is ``scorer(key_feature, entries) -> [(id, score)]``.
"""

from __future__ import annotations

import dataclasses
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError, StageError, TooFewFramesError
from .geometry import CameraIntrinsics, Pointmap, Pose, derive_pose
from .i2p import WindowClip, canonical_scale
from .l2w import SceneFrame, recon_score
from .retrieval import BufferSet, periodic_buffer_update, top_k_scene_frames

log = logging.getLogger(__name__)

PRESETS = {
    "replica-style": {"skip": 20, "co": 10, "k": 10, "r_period": 20},
    "sampled-style": {"skip": 1, "co": 2, "k": 5, "r_period": 1},
}
SELECTION_MODES = ("retrieval", "recent")


@dataclass
class PipelineConfig:
    """Every knob of the reconstruction loop.

    ``l_init`` frames seed the world frame, ``l`` is the incremental window
    length, supports sit ``skip`` frames apart, ``k`` scene frames are
    retrieved per step for ``co`` co-registered keyframes, the reservoir
    holds ``b`` entries and is refreshed every ``r_period`` keyframes.
    ``conf_threshold = 0`` disables filtering.
    """

    l_init: int = 5
    l: int = 11
    stride: int = 1
    skip: int = 1
    k: int = 10
    co: int = 1
    b: int = 100
    r_period: int = 1
    conf_threshold: float = 3.0
    r: int = 2
    alpha: float = 0.2
    seed: int = 0
    selection: str = "retrieval"
    eval_icp_iters: int = 50
    eval_icp_tol: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("l_init", "l", "stride", "skip", "k", "co", "b", "r_period", "r"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.l_init < 2 or self.l < 2:
            raise ConfigError("window lengths must be >= 2")
        if not (self.conf_threshold == 0 or self.conf_threshold >= 1):
            raise ConfigError(f"conf_threshold must be 0 or >= 1, got {self.conf_threshold}")
        if self.selection not in SELECTION_MODES:
            raise ConfigError(f"selection must be one of {SELECTION_MODES}")
        if self.alpha < 0 or self.eval_icp_iters < 0 or self.eval_icp_tol <= 0:
            raise ConfigError("alpha, eval_icp_iters must be >= 0 and eval_icp_tol > 0")

    @classmethod
    def preset(cls, name: str, **overrides) -> PipelineConfig:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Window:
    """Frame ids of one window plus the position of its keyframe."""

    frame_ids: tuple[int, ...]
    key_index: int

    @property
    def key_id(self) -> int:
        return self.frame_ids[self.key_index]

    def __len__(self):
        return len(self.frame_ids)

    def clip(self, frames) -> WindowClip:
        return WindowClip(np.asarray(frames)[list(self.frame_ids)], list(self.frame_ids), self.key_index)


def window_ids(key: int, n_frames: int, length: int, skip: int) -> Window:
    """Supports at ``±skip, ±2·skip, …`` around ``key``, right side first.

    Offsets falling outside ``[0, n_frames)`` are skipped and the search
    continues outwards, so boundary windows become asymmetric but keep
    their length whenever enough frames exist.
    """
    chosen = []
    step = 1
    while len(chosen) < length - 1:
        right, left = key + step * skip, key - step * skip
        if right >= n_frames and left < 0:
            break
        for c in (right, left):
            if 0 <= c < n_frames and len(chosen) < length - 1:
                chosen.append(c)
        step += 1
    ids = sorted([key, *chosen])
    return Window(tuple(ids), ids.index(key))


def make_windows(n_frames: int, cfg: PipelineConfig) -> list[Window]:
    """One window per keyframe ``0, stride, 2·stride, …``."""
    if n_frames < 2:
        raise TooFewFramesError(f"need at least 2 frames, got {n_frames}")
    return [window_ids(k, n_frames, cfg.l, cfg.skip) for k in range(0, n_frames, cfg.stride)]


def init_window(n_frames: int, cfg: PipelineConfig) -> Window:
    """First ``l_init`` frames at spacing ``skip`` (spacing 1 if the sequence is too short)."""
    if n_frames < 2:
        raise TooFewFramesError(f"need at least 2 frames, got {n_frames}")
    length = min(cfg.l_init, n_frames)
    spacing = cfg.skip if (length - 1) * cfg.skip < n_frames else 1
    return Window(tuple(range(0, (length - 1) * spacing + 1, spacing)), 0)


@dataclass
class LocalPrediction:
    """Output of an I2P adapter for one window, in the keyframe's camera frame."""

    pointmaps: list[Pointmap]
    conf: np.ndarray  # (L, H, W)
    features: list  # per-frame encoder features (opaque to the pipeline)
    frame_ids: tuple[int, ...]
    key_index: int

    @property
    def key_pointmap(self) -> Pointmap:
        return self.pointmaps[self.key_index]

    @property
    def key_conf(self) -> np.ndarray:
        return self.conf[self.key_index]

    @property
    def key_feature(self):
        return self.features[self.key_index]


@dataclass
class Keyframe:
    id: int
    feature: object
    local: Pointmap
    i2p_conf: np.ndarray


def filter_by_confidence(points: np.ndarray, conf: np.ndarray, threshold: float, valid=None) -> np.ndarray:
    """Boolean keep-mask: ``conf > threshold`` (all kept at threshold 0)."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    conf = np.asarray(conf)
    keep = np.ones(conf.shape, dtype=bool) if threshold == 0 else conf > threshold
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool)
    return keep


class SceneModel:
    """Accumulated world-frame cloud with per-point provenance."""

    def __init__(self, intrinsics: CameraIntrinsics | None = None):
        self.intrinsics = intrinsics
        self._chunks: list[tuple] = []
        self.frames: dict[int, SceneFrame] = {}
        self.contributed: list[int] = []
        self._seen: set[int] = set()
        self._cache = None
        self._trajectory: dict[int, Pose] | None = None

    def add_frame(self, frame_id: int, pointmap: Pointmap, conf: np.ndarray, keep: np.ndarray, colors=None) -> int:
        if frame_id in self._seen:
            raise InputError(f"frame {frame_id} already contributed points")
        idx = np.flatnonzero(keep.ravel())
        pts = pointmap.points.reshape(-1, 3)[idx]
        c = np.asarray(conf, dtype=np.float64).ravel()[idx]
        if colors is None:
            rgb = np.zeros((len(idx), 3), dtype=np.uint8)
        else:
            rgb = np.clip(np.round(np.asarray(colors).reshape(-1, 3)[idx] * 255), 0, 255).astype(np.uint8)
        self._chunks.append((pts, c, np.full(len(idx), frame_id, dtype=np.int32), idx.astype(np.int32), rgb))
        self.contributed.append(frame_id)
        self._seen.add(frame_id)
        self._cache = None
        return len(idx)

    def _arrays(self):
        if self._cache is None:
            if self._chunks:
                self._cache = tuple(np.concatenate(col) for col in zip(*self._chunks))
            else:
                self._cache = (np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int32), np.zeros(0, np.int32), np.zeros((0, 3), np.uint8))
        return self._cache

    @property
    def points(self) -> np.ndarray:
        return self._arrays()[0]

    @property
    def confidence(self) -> np.ndarray:
        return self._arrays()[1]

    @property
    def frame_ids(self) -> np.ndarray:
        return self._arrays()[2]

    @property
    def pixel_index(self) -> np.ndarray:
        return self._arrays()[3]

    @property
    def colors(self) -> np.ndarray:
        return self._arrays()[4]

    def __len__(self):
        return sum(len(c[0]) for c in self._chunks)

    def trajectory(self, ransac_iters: int = 200, inlier_px: float = 2.0, seed: int = 0) -> dict[int, Pose]:
        """Camera-to-world pose per registered frame, derived lazily from its world pointmap."""
        if self._trajectory is None:
            if self.intrinsics is None:
                raise InputError("trajectory needs camera intrinsics")
            self._trajectory = {
                fid: derive_pose(f.global_points, self.intrinsics, ransac_iters, inlier_px, rng=seed).pose
                for fid, f in sorted(self.frames.items())
            }
        return self._trajectory


@dataclass
class RunResult:
    scene: SceneModel
    timings: dict[str, float]
    n_frames: int
    registered: int
    init_keyframe: int
    log_lines: list[str] = field(default_factory=list)

    @property
    def fps(self) -> float:
        total = self.timings["total"]
        return self.n_frames / total if total > 0 else 0.0


class RegistrationState:
    """Everything the registration stage owns exclusively."""

    def __init__(self, cfg: PipelineConfig, scene: SceneModel, buffer: BufferSet):
        self.cfg = cfg
        self.scene = scene
        self.buffer = buffer
        self.pending: list[SceneFrame] = []
        self.registered = 0
        self.windows_done = 0
        self.log_lines: list[str] = []


def init_scene(i2p, frames, window: Window, cfg: PipelineConfig, intrinsics=None, timings=None):
    """Run I2P once per keyframe choice and keep the most confident run.

    Returns ``(state, chosen_key_index, per_run_predictions)``. The chosen
    run's keyframe camera defines the world frame; every init frame becomes
    a scene frame and is offered to the buffer.
    """
    runs = []
    for key in range(len(window)):
        runs.append(i2p.run(frames, Window(window.frame_ids, key)))
    totals = [float(np.sum(r.conf)) for r in runs]
    best = int(np.argmax(totals))  # argmax returns the first (lowest) index on ties
    pred = runs[best]
    scene = SceneModel(intrinsics)
    buffer = BufferSet(cfg.b, cfg.seed)
    state = RegistrationState(cfg, scene, buffer)
    images = np.asarray(frames)
    for fid, pm, conf, feat in zip(pred.frame_ids, pred.pointmaps, pred.conf, pred.features):
        c = np.asarray(conf, dtype=np.float64)
        sf = SceneFrame(fid, feat, pm, c, recon_score(c, c))
        scene.frames[fid] = sf
        keep = filter_by_confidence(pm.points, c, cfg.conf_threshold, pm.valid)
        scene.add_frame(fid, pm, c, keep, images[fid])
        buffer.offer(sf)
    return state, best, runs


def _recent_frames(state: RegistrationState, k: int, before: int) -> list[SceneFrame]:
    ids = sorted((i for i in state.scene.frames if i < before), reverse=True)[:k]
    return [state.scene.frames[i] for i in ids]


def register_step(state: RegistrationState, batch: Sequence[Keyframe], l2w, scorer, frames=None) -> list[int]:
    """Co-register ``batch`` against shared scene frames; returns the retrieved ids."""
    if not batch:
        return []
    cfg = state.cfg
    if cfg.selection == "recent":
        refs = _recent_frames(state, cfg.k, min(kf.id for kf in batch))
    else:
        exclude = {kf.id for kf in batch}
        refs = top_k_scene_frames(state.buffer, [kf.feature for kf in batch], cfg.k, scorer, exclude=exclude)
    outputs = l2w.register(batch, refs)
    ref_ids = [r.id for r in refs]
    for kf, (pm, conf) in zip(batch, outputs):
        conf = np.asarray(conf, dtype=np.float64)
        sf = SceneFrame(kf.id, kf.feature, pm, conf, recon_score(kf.i2p_conf, conf))
        keep = filter_by_confidence(pm.points, conf, cfg.conf_threshold, pm.valid)
        n = state.scene.add_frame(kf.id, pm, conf, keep, None if frames is None else np.asarray(frames[kf.id]))
        state.scene.frames[kf.id] = sf
        state.pending.append(sf)
        state.registered += 1
        state.windows_done += 1
        line = f"window {kf.id} refs={','.join(map(str, ref_ids))} mean_conf={float(conf.mean()):.4f} points={len(state.scene)}"
        state.log_lines.append(line)
        log.info(line)
        if len(state.pending) >= cfg.r_period:
            periodic_buffer_update(state.buffer, state.pending)
            state.pending = []
    return ref_ids


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def run(i2p, l2w, scorer, frames, cfg: PipelineConfig, intrinsics: CameraIntrinsics | None = None, overlap: bool = False) -> RunResult:
    """Reconstruct ``frames`` end to end.

    ``overlap=True`` runs I2P in a producer thread feeding a bounded queue so
    local inference of the next window overlaps registration of the current
    one; the scene and buffer stay owned by the calling thread.
    """
    frames = np.asarray(frames)
    n = len(frames)
    timings = {"init": 0.0, "i2p": 0.0, "register": 0.0}
    t0 = time.perf_counter()
    stage = "windows"
    try:
        win0 = init_window(n, cfg)
        windows = [w for w in make_windows(n, cfg) if w.key_id not in set(win0.frame_ids)]
        stage = "init"
        t = time.perf_counter()
        state, best, _ = init_scene(i2p, frames, win0, cfg, intrinsics)
        timings["init"] = time.perf_counter() - t

        def local(w: Window) -> Keyframe:
            p = i2p.run(frames, w)
            return Keyframe(w.key_id, p.key_feature, p.key_pointmap, np.asarray(p.key_conf, dtype=np.float64))

        stage = "register"
        if overlap:
            _run_overlapped(state, windows, local, l2w, scorer, frames, timings)
        else:
            for group in _batches(windows, cfg.co):
                t = time.perf_counter()
                batch = [local(w) for w in group]
                timings["i2p"] += time.perf_counter() - t
                t = time.perf_counter()
                register_step(state, batch, l2w, scorer, frames)
                timings["register"] += time.perf_counter() - t
    except StageError:
        raise
    except Exception as exc:  # tag with the failing stage
        raise StageError(stage, exc) from exc
    timings["total"] = time.perf_counter() - t0
    return RunResult(state.scene, timings, n, state.registered, win0.frame_ids[best], state.log_lines)


def _run_overlapped(state, windows, local, l2w, scorer, frames, timings):
    q: queue.Queue = queue.Queue(maxsize=2)
    groups = list(_batches(windows, state.cfg.co))
    done = object()

    def produce():
        try:
            for group in groups:
                t = time.perf_counter()
                batch = [local(w) for w in group]
                timings["i2p"] += time.perf_counter() - t
                q.put(batch)
            q.put(done)
        except Exception as exc:  # surfaced in the consumer
            q.put(exc)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, Exception):
            raise item
        t = time.perf_counter()
        register_step(state, item, l2w, scorer, frames)
        timings["register"] += time.perf_counter() - t
    worker.join()


# ---------------------------------------------------------------- adapters


class TorchI2P:
    """Trained I2P network; predictions are rescaled to unit canonical scale."""

    def __init__(self, model):
        self.model = model

    def run(self, frames, window: Window) -> LocalPrediction:
        from .i2p import i2p_forward

        out = i2p_forward(self.model, window.clip(frames))
        pms = out.pointmaps()
        z = canonical_scale(pms)
        pms = [Pointmap(pm.points / z, pm.valid) for pm in pms]
        feats = list(out.feats[0])
        return LocalPrediction(pms, out.confidences(), feats, window.frame_ids, window.key_index)


class TorchL2W:
    def __init__(self, model):
        self.model = model

    def register(self, keyframes: Sequence[Keyframe], scene_frames: Sequence[SceneFrame]):
        from .l2w import l2w_forward

        out = l2w_forward(self.model, [(kf.feature, kf.local) for kf in keyframes], scene_frames)
        pts = out.key_points[0].double().numpy()
        conf = out.key_conf[0].double().numpy()
        return [(Pointmap.full(p), c) for p, c in zip(pts, conf)]


def head_scorer(head) -> Callable:
    from .retrieval import retrieval_scores

    def score(key_feature, entries):
        return retrieval_scores(head, key_feature, entries)

    return score


def from_models(i2p_model, l2w_model, head=None):
    """``(i2p, l2w, scorer)`` adapters for trained networks."""
    scorer = head_scorer(head) if head is not None else None
    return TorchI2P(i2p_model), TorchL2W(l2w_model), scorer


def expected_registrations(n_frames: int, cfg: PipelineConfig) -> int:
    """Keyframes registered after initialization for a stride-``cfg.stride`` run."""
    win0 = init_window(n_frames, cfg)
    return sum(1 for k in range(0, n_frames, cfg.stride) if k not in win0.frame_ids)
