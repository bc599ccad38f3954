"""Toy training loops for the I2P network, the L2W network and the retrieval head."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from ..errors import NumericError
from ..geometry import Pointmap, rotation_about
from ..i2p import I2PNet, canonical_scale, loss_i2p
from ..l2w import L2WNet, loss_l2w
from ..pipeline import window_ids
from ..retrieval import RetrievalHead, loss_retrieval
from .clips import TrainingClip


@dataclass
class TrainConfig:
    """Optimization settings.

    ``mix`` is the share of L2W keyframe inputs taken from I2P predictions
    (the rest are noisy ground truth). ``min_frames`` lets I2P batches drop
    supports so the model sees every window length from ``min_frames`` up
    to the clip length.
    """

    clip_len: int = 5
    batch_size: int = 16
    epochs: int = 1
    lr: float = 1e-3
    seed: int = 0
    mix: float = 0.5
    alpha: float = 0.2
    jitter: float = 0.1
    min_frames: int = 2
    warmup: int = 50
    grad_clip: float = 1.0
    input_noise: float = 0.02
    max_batches: int | None = None

    def __post_init__(self):
        if min(self.clip_len, self.batch_size) < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("clip_len, batch_size must be >= 1, epochs >= 0, lr > 0")
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError(f"mix must lie in [0, 1], got {self.mix}")


@dataclass
class TrainResult:
    model: torch.nn.Module
    curve: list[float]
    held_out_loss: float | None
    manifest: dict = field(default_factory=dict)
    batch_losses: list[float] = field(default_factory=list)


def make_optimizer(params, cfg: TrainConfig):
    # Adam with beta1 = 0: per-coordinate adaptive step, no momentum
    return torch.optim.Adam(params, lr=cfg.lr, betas=(0.0, 0.999), eps=1e-8)


def _schedule(opt, cfg: TrainConfig, total_steps: int):
    def factor(step):
        if step < cfg.warmup:
            return (step + 1) / cfg.warmup
        frac = (step - cfg.warmup) / max(1, total_steps - cfg.warmup)
        return 0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0)))

    return torch.optim.lr_scheduler.LambdaLR(opt, factor)


def manifest(kind: str, cfg: TrainConfig, n_clips: int, curve, held_out, seconds: float) -> dict:
    return {
        "kind": kind,
        "optimizer": "Adam(beta1=0, beta2=0.999, eps=1e-8)",
        "schedule": f"linear warmup {cfg.warmup} steps, cosine decay to 0.1x",
        "grad_clip": cfg.grad_clip,
        "augmentation": f"color jitter ±{cfg.jitter}",
        "config": asdict(cfg),
        "clips": n_clips,
        "curve": list(curve),
        "held_out_loss": held_out,
        "seconds": round(seconds, 3),
        "torch": torch.__version__,
    }


def color_jitter(images: np.ndarray, amount: float, rng) -> np.ndarray:
    """Per-clip brightness and per-channel gain in ``[1 - amount, 1 + amount]``."""
    if amount <= 0:
        return images
    gain = rng.uniform(1 - amount, 1 + amount) * rng.uniform(1 - amount / 2, 1 + amount / 2, size=3)
    return np.clip(images * gain, 0.0, 1.0).astype(images.dtype)


def _check_finite(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss ({float(loss.detach())}) at {where}")


def _step(model, opt, sched, loss, cfg):
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    opt.step()
    sched.step()


# ------------------------------------------------------------------- I2P


def i2p_batch(clips: Sequence[TrainingClip], n_frames: int | None, rng, jitter: float = 0.0):
    """Stack clips into ``(images, gt, valid, key_index)``.

    With ``n_frames`` set, every clip keeps its keyframe plus a random
    subset of supports so the batch has ``n_frames`` frames per clip; the
    keyframe index is the same for the whole batch.
    """
    L = len(clips[0])
    n = L if n_frames is None else n_frames
    key = clips[0].key_index
    sups = [i for i in range(L) if i != key]
    keep = sorted(rng.choice(sups, n - 1, replace=False).tolist() + [key]) if n < L else list(range(L))
    key_pos = keep.index(key)
    imgs, gts, valids = [], [], []
    for c in clips:
        if c.key_index != key or len(c) != L:
            raise ValueError("clips in one batch must share length and keyframe position")
        im = c.images()[keep]
        imgs.append(color_jitter(im, jitter, rng))
        pms = c.gt_pointmaps()
        gts.append(np.stack([pms[i].points for i in keep]))
        valids.append(np.stack([pms[i].valid for i in keep]))
    as_t = lambda x: torch.from_numpy(np.stack(x))  # noqa: E731
    return as_t(imgs).float(), as_t(gts).float(), as_t(valids), key_pos


def i2p_loss_on(model: I2PNet, clips, alpha: float, n_frames=None, rng=None) -> torch.Tensor:
    rng = rng or np.random.default_rng(0)
    imgs, gt, valid, key = i2p_batch(clips, n_frames, rng)
    out = model(imgs, key)
    return loss_i2p(out.points, out.conf, gt, valid, alpha).mean


@torch.no_grad()
def held_out_i2p_loss(model: I2PNet, clips, alpha: float = 0.2, batch_size: int = 16) -> float:
    losses = []
    for i in range(0, len(clips), batch_size):
        losses.append(float(i2p_loss_on(model, clips[i : i + batch_size], alpha)) * len(clips[i : i + batch_size]))
    return sum(losses) / max(1, len(clips))


def train_i2p_toy(
    model: I2PNet,
    clips: Sequence[TrainingClip],
    cfg: TrainConfig,
    held_out: Sequence[TrainingClip] | None = None,
    progress: Callable[[str], None] | None = None,
) -> TrainResult:
    """Mini-batch training on :func:`loss_i2p` (mean over valid pixels)."""
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n_batches = math.ceil(len(clips) / cfg.batch_size)
    if cfg.max_batches is not None:
        n_batches = min(n_batches, cfg.max_batches)
    opt = make_optimizer(model.parameters(), cfg)
    sched = _schedule(opt, cfg, cfg.epochs * n_batches)
    curve, batch_losses = [], []
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(clips))
        ep = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = [clips[i] for i in idx]
            L = len(batch[0])
            n = int(rng.integers(cfg.min_frames, L + 1)) if cfg.min_frames < L else L
            imgs, gt, valid, key = i2p_batch(batch, n, rng, cfg.jitter)
            out = model(imgs, key)
            loss = loss_i2p(out.points, out.conf, gt, valid, cfg.alpha).mean
            _check_finite(loss, f"epoch {epoch} batch {b}")
            _step(model, opt, sched, loss, cfg)
            ep.append(float(loss.detach()))
        batch_losses.extend(ep)
        curve.append(float(np.mean(ep)))
        if progress:
            progress(f"i2p epoch {epoch}: loss {curve[-1]:.4f} ({time.perf_counter() - t0:.0f}s)")
    model.eval()
    held = held_out_i2p_loss(model, held_out, cfg.alpha) if held_out else None
    return TrainResult(model, curve, held, manifest("I2P", cfg, len(clips), curve, held, time.perf_counter() - t0), batch_losses)


# ------------------------------------------------------------------- L2W


class FrameCache:
    """Encoder features and normalized I2P keyframe predictions per scene frame."""

    def __init__(self, i2p: I2PNet, window: int = 5, skip: int = 1):
        self.i2p, self.window, self.skip = i2p, window, skip
        self._feat: dict[tuple[int, int], torch.Tensor] = {}
        self._pred: dict[tuple[int, int], np.ndarray] = {}

    @torch.no_grad()
    def features(self, scene, ids) -> torch.Tensor:
        missing = [i for i in ids if (id(scene), i) not in self._feat]
        if missing:
            f = self.i2p.encode(torch.from_numpy(scene.images[missing]).float())
            for i, x in zip(missing, f):
                self._feat[(id(scene), i)] = x
        return torch.stack([self._feat[(id(scene), i)] for i in ids])

    @torch.no_grad()
    def prediction(self, scene, i: int) -> np.ndarray:
        """Keyframe pointmap of the I2P window around frame ``i`` at unit canonical scale."""
        k = (id(scene), i)
        if k not in self._pred:
            w = window_ids(i, scene.n_frames, self.window, self.skip)
            out = self.i2p(torch.from_numpy(scene.images[list(w.frame_ids)]).float()[None], w.key_index)
            pts = out.points[0].double().numpy()
            z = canonical_scale([Pointmap.full(p) for p in pts])
            self._pred[k] = (pts[w.key_index] / z).astype(np.float32)
        return self._pred[k]


def _random_rigid(rng):
    R = rotation_about([0.0, 1.0, 0.0], rng.uniform(-np.pi, np.pi))
    return R, rng.uniform(-1.0, 1.0, size=3)


def l2w_batch(clips: Sequence[TrainingClip], cache: FrameCache, cfg: TrainConfig, rng, n_key=None, n_scene=None, augment=True):
    """Tensors for one L2W step, scene frames first.

    World frame: the clip's first camera, scaled so the scene frames have
    unit canonical scale, optionally moved by a random rigid motion.
    Keyframe inputs are I2P predictions with probability ``cfg.mix``,
    otherwise ground truth at unit scale plus Gaussian noise.
    """
    ns, nk = clips[0].n_scene, len(clips[0]) - clips[0].n_scene
    n_scene = n_scene or ns
    n_key = n_key or nk
    s_idx = sorted(rng.choice(ns, n_scene, replace=False).tolist())
    k_idx = sorted((ns + rng.choice(nk, n_key, replace=False)).tolist())
    out = {k: [] for k in ("kf", "kp", "kv", "sf", "sp", "sv", "gt", "gv")}
    for c in clips:
        gt = c.gt_pointmaps()
        z = canonical_scale(gt[:ns])
        R, t = _random_rigid(rng) if augment and rng.random() < 0.5 else (np.eye(3), np.zeros(3))
        world = [(pm.points / z) @ R.T + t for pm in gt]
        valid = [pm.valid for pm in gt]
        noise = cfg.input_noise
        sp = [world[i] + rng.normal(0, noise, world[i].shape) for i in s_idx]
        kp = []
        for i in k_idx:
            fid = c.frame_ids[i]
            if rng.random() < cfg.mix:
                kp.append(cache.prediction(c.scene, fid))
            else:
                local = c.scene.world_points(fid).transformed(c.scene.poses[fid].inverse())
                zl = canonical_scale([local])
                kp.append(local.points / zl + rng.normal(0, noise, local.points.shape))
        ids = list(c.frame_ids)
        out["sf"].append(cache.features(c.scene, [ids[i] for i in s_idx]))
        out["kf"].append(cache.features(c.scene, [ids[i] for i in k_idx]))
        out["sp"].append(np.stack(sp))
        out["kp"].append(np.stack(kp))
        out["sv"].append(np.stack([valid[i] for i in s_idx]))
        out["kv"].append(np.stack([valid[i] for i in k_idx]))
        out["gt"].append(np.stack([world[i] for i in s_idx + k_idx]))
        out["gv"].append(np.stack([valid[i] for i in s_idx + k_idx]))
    res = {}
    for k, v in out.items():
        res[k] = torch.stack(v) if isinstance(v[0], torch.Tensor) else torch.from_numpy(np.stack(v))
        if res[k].is_floating_point():
            res[k] = res[k].float()
    return res


def l2w_loss_on(model: L2WNet, b: dict, alpha: float):
    out = model(b["kf"], b["kp"], b["sf"], b["sp"], b["kv"], b["sv"])
    return loss_l2w(out.points, out.conf, b["gt"], b["gv"], alpha).mean


def train_l2w_toy(
    model: L2WNet,
    i2p: I2PNet,
    clips: Sequence[TrainingClip],
    cfg: TrainConfig,
    held_out: Sequence[TrainingClip] | None = None,
    progress: Callable[[str], None] | None = None,
    cache: FrameCache | None = None,
) -> TrainResult:
    """Mini-batch training on :func:`loss_l2w`; the I2P network stays frozen."""
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    i2p.eval()
    cache = cache or FrameCache(i2p)
    n_batches = math.ceil(len(clips) / cfg.batch_size)
    if cfg.max_batches is not None:
        n_batches = min(n_batches, cfg.max_batches)
    opt = make_optimizer(model.parameters(), cfg)
    sched = _schedule(opt, cfg, cfg.epochs * n_batches)
    curve, batch_losses = [], []
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(clips))
        ep = []
        for bi in range(n_batches):
            batch = [clips[i] for i in order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]]
            ns, nk = batch[0].n_scene, len(batch[0]) - batch[0].n_scene
            b = l2w_batch(batch, cache, cfg, rng, int(rng.integers(1, nk + 1)), int(rng.integers(1, ns + 1)))
            loss = l2w_loss_on(model, b, cfg.alpha)
            _check_finite(loss, f"epoch {epoch} batch {bi}")
            _step(model, opt, sched, loss, cfg)
            ep.append(float(loss.detach()))
        batch_losses.extend(ep)
        curve.append(float(np.mean(ep)))
        if progress:
            progress(f"l2w epoch {epoch}: loss {curve[-1]:.4f} ({time.perf_counter() - t0:.0f}s)")
    model.eval()
    held = None
    if held_out:
        hr = np.random.default_rng(cfg.seed + 1)
        with torch.no_grad():
            vals = [float(l2w_loss_on(model, l2w_batch(held_out[i : i + cfg.batch_size], cache, cfg, hr, augment=False), cfg.alpha))
                    for i in range(0, len(held_out), cfg.batch_size)]
        held = float(np.mean(vals))
    return TrainResult(model, curve, held, manifest("L2W", cfg, len(clips), curve, held, time.perf_counter() - t0), batch_losses)


@torch.no_grad()
def l2w_keyframe_error(model: L2WNet, i2p: I2PNet, clips: Sequence[TrainingClip], seed: int = 0) -> np.ndarray:
    """Per-clip mean keyframe world-point error in scene units.

    Keyframes enter as exact local ground truth, so their input differs from
    the world frame by a known similarity; the error measures registration
    alone.
    """
    cfg = TrainConfig(clip_len=len(clips[0]), mix=0.0, input_noise=0.0)
    cache = FrameCache(i2p)
    rng = np.random.default_rng(seed)
    model.eval()
    errs = []
    for c in clips:
        b = l2w_batch([c], cache, cfg, rng, augment=False)
        out = model(b["kf"], b["kp"], b["sf"], b["sp"], b["kv"], b["sv"])
        ns = c.n_scene
        d = (out.points[0, ns:].double() - b["gt"][0, ns:].double()).norm(dim=-1)
        z = canonical_scale(c.gt_pointmaps()[:ns])
        errs.append(float(d[b["gv"][0, ns:]].mean()) * z)
    return np.asarray(errs)


# ------------------------------------------------------------- retrieval


@torch.no_grad()
def retrieval_pairs(i2p: I2PNet, head: RetrievalHead, scenes, pairs_per_scene: int = 48, max_offset: int = 32, seed: int = 0):
    """Pooled backbone outputs and I2P confidence targets for (key, other) pairs.

    Each pair is run through I2P as a two-frame window; the target is the
    supporting frame's confidence map.
    """
    rng = np.random.default_rng(seed)
    pooled, confs = [], []
    for scene in scenes:
        n = scene.n_frames
        keys = rng.integers(0, n, pairs_per_scene)
        offs = rng.integers(1, max_offset + 1, pairs_per_scene) * rng.choice([-1, 1], pairs_per_scene)
        others = np.clip(keys + offs, 0, n - 1)
        others = np.where(others == keys, (keys + 1) % n, others)
        for k, o in zip(keys.tolist(), others.tolist()):
            ids = sorted([k, o])
            imgs = torch.from_numpy(scene.images[ids]).float()[None]
            out = i2p(imgs, ids.index(k))
            feats = out.feats[0]
            kf, of = feats[ids.index(k)], feats[ids.index(o)]
            pooled.append(head.pooled(kf, of[None])[0])
            confs.append(out.conf[0, ids.index(o)])
    return torch.stack(pooled), torch.stack(confs)


def train_retrieval_head(
    head: RetrievalHead,
    i2p: I2PNet,
    data: tuple[torch.Tensor, torch.Tensor],
    cfg: TrainConfig,
    progress: Callable[[str], None] | None = None,
) -> TrainResult:
    """Fit the projection on precomputed ``(pooled, confidence)`` pairs.

    The backbone never sees an optimizer: only ``head.proj`` parameters are
    handed to it, and pooled features are computed without gradients.
    """
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    pooled, conf = data
    opt = make_optimizer(head.proj.parameters(), cfg)
    n_batches = math.ceil(len(pooled) / cfg.batch_size)
    sched = _schedule(opt, cfg, cfg.epochs * n_batches)
    curve = []
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(len(pooled)))
        ep = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            raw = head.proj(pooled[idx]).squeeze(-1)
            loss = loss_retrieval(raw, conf[idx]) / len(idx)
            _check_finite(loss, f"epoch {epoch} batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            ep.append(float(loss.detach()))
        curve.append(float(np.mean(ep)))
        if progress:
            progress(f"retrieval epoch {epoch}: loss {curve[-1]:.4f}")
    return TrainResult(head, curve, None, manifest("RET", cfg, len(pooled), curve, None, time.perf_counter() - t0))


@torch.no_grad()
def keyframe_error(model: I2PNet, clips: Sequence[TrainingClip], keep: Sequence[int] | None = None) -> np.ndarray:
    """Per-clip mean keyframe point error after matching the keyframe's canonical scale.

    ``keep`` selects clip positions (must include the keyframe); the
    prediction is rescaled by ``z_gt / z_pred`` of the keyframe alone so
    windows of different lengths are compared on equal terms.
    """
    errs = []
    for c in clips:
        pos = list(range(len(c))) if keep is None else list(keep)
        key = pos.index(c.key_index)
        imgs = torch.from_numpy(c.images()[pos]).float()[None]
        pred = model(imgs, key).points[0, key].double().numpy()
        gt = c.gt_pointmaps()[c.key_index]
        v = gt.valid
        s = np.linalg.norm(gt.points[v], axis=1).mean() / np.linalg.norm(pred[v], axis=1).mean()
        errs.append(float(np.linalg.norm(pred[v] * s - gt.points[v], axis=1).mean()))
    return np.asarray(errs)
