"""Image-to-points network: per-window pointmaps in the keyframe's camera frame."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import DegenerateScaleError, EmptySupervisionError, EmptyWindowError, ShapeError
from .geometry import Pointmap
from .nn.blocks import BlockConfig, EncoderBlock, MultiviewDecoderBlock, PatchEmbed, RegressionHead, init_weights
from .nn.checkpoint import load_tensors, save_module

SCALE_FLOOR = 1e-8
scale_guard_hits = 0


@dataclass
class WindowClip:
    """An ordered clip of frames; ``key_index`` overrides the default keyframe."""

    images: np.ndarray
    frame_ids: list[int]
    key_index: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.frame_ids = [int(i) for i in self.frame_ids]
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ShapeError(f"window images must be (L, H, W, 3), got {self.images.shape}")
        if len(self.frame_ids) != len(self.images):
            raise ShapeError("one frame id per image required")
        if len(self.images) < 2:
            raise ShapeError("a window needs at least 2 frames")
        if any(b <= a for a, b in zip(self.frame_ids, self.frame_ids[1:])):
            raise ValueError("frame ids must be strictly increasing")
        if self.key_index is not None and not 0 <= self.key_index < len(self.images):
            raise ValueError(f"key_index {self.key_index} out of range")

    def __len__(self):
        return len(self.frame_ids)


def select_keyframe(window) -> int:
    """Middle frame unless the window carries an explicit override."""
    override = getattr(window, "key_index", None)
    if override is not None:
        return int(override)
    return len(window) // 2


@dataclass
class I2POutput:
    """Per-frame predictions, all in the keyframe's camera frame.

    Tensors carry a leading batch dimension: points ``(B, L, H, W, 3)``,
    conf ``(B, L, H, W)``, tokens/feats ``(B, L, T, d)``.
    """

    points: torch.Tensor
    conf: torch.Tensor
    tokens: torch.Tensor
    feats: torch.Tensor
    key_index: int
    frame_ids: list[int] = field(default_factory=list)

    @property
    def scale(self) -> torch.Tensor:
        """Canonical scale ẑ of the predicted window (per batch entry)."""
        return self.points.norm(dim=-1).mean(dim=(1, 2, 3))

    def pointmaps(self, b: int = 0) -> list[Pointmap]:
        pts = self.points[b].detach().double().cpu().numpy()
        return [Pointmap.full(p) for p in pts]

    def confidences(self, b: int = 0) -> np.ndarray:
        return self.conf[b].detach().double().cpu().numpy()


class I2PNet(nn.Module):
    """Shared encoder, multi-view keyframe decoder, two-view supporting decoder, heads."""

    kind = "I2P"

    def __init__(self, cfg: BlockConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or BlockConfig()
        self.cfg = cfg
        d, h, r = cfg.d, cfg.heads, cfg.mlp_ratio
        self.patch_embed = PatchEmbed(cfg.p, d, cfg.grid)
        self.enc_blocks = nn.ModuleList([EncoderBlock(d, h, r) for _ in range(cfg.m)])
        self.enc_norm = nn.LayerNorm(d, eps=1e-6)
        self.key_blocks = nn.ModuleList([MultiviewDecoderBlock(d, h, r) for _ in range(cfg.n)])
        self.sup_blocks = nn.ModuleList([MultiviewDecoderBlock(d, h, r) for _ in range(cfg.n)])
        self.dec_norm = nn.LayerNorm(d, eps=1e-6)
        self.key_head = RegressionHead(d, cfg.p, cfg.grid)
        self.sup_head = RegressionHead(d, cfg.p, cfg.grid)
        init_weights(self, seed)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """``(..., H, W, 3) -> (..., T, d)``; frames are encoded independently."""
        x = self.patch_embed(images)
        for blk in self.enc_blocks:
            x = blk(x)
        return self.enc_norm(x)

    def decode(self, feats: torch.Tensor, key_index: int, depth: int | None = None):
        """Lockstep decoding; returns ``(key_tokens (B,T,d), sup_tokens (B,S,T,d))``.

        Block ``j`` of each decoder cross-attends to the other branch's
        output of block ``j-1``. ``depth`` truncates the stacks (retrieval
        uses the first ``r`` blocks) and skips the final norm.
        """
        L = feats.shape[1]
        if not 0 <= key_index < L:
            raise ValueError(f"key_index {key_index} out of range for {L} frames")
        key = feats[:, key_index]
        sups = torch.cat([feats[:, :key_index], feats[:, key_index + 1 :]], dim=1)
        n = len(self.key_blocks) if depth is None else depth
        for j in range(n):
            new_key = self.key_blocks[j](key, [sups[:, s] for s in range(sups.shape[1])])
            sups = self.sup_blocks[j](sups, [key.unsqueeze(1)])
            key = new_key
        if depth is None:
            key, sups = self.dec_norm(key), self.dec_norm(sups)
        return key, sups

    def forward(self, images: torch.Tensor, key_index: int) -> I2POutput:
        if images.ndim != 5:
            raise ShapeError(f"expected (B, L, H, W, 3) images, got {tuple(images.shape)}")
        if images.shape[1] < 2:
            raise ShapeError("a window needs at least 2 frames")
        feats = self.encode(images)
        key, sups = self.decode(feats, key_index)
        kp, kc = self.key_head(key)
        sp, sc = self.sup_head(sups)
        pts = torch.cat([sp[:, :key_index], kp.unsqueeze(1), sp[:, key_index:]], dim=1)
        conf = torch.cat([sc[:, :key_index], kc.unsqueeze(1), sc[:, key_index:]], dim=1)
        toks = torch.cat([sups[:, :key_index], key.unsqueeze(1), sups[:, key_index:]], dim=1)
        return I2POutput(pts, conf, toks, feats, key_index)

    def save(self, path) -> None:
        save_module(path, self, self.kind, self.cfg.as_list())

    @classmethod
    def load(cls, path) -> I2PNet:
        config, state = load_tensors(path, cls.kind)
        model = cls(BlockConfig.from_list(config))
        model.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
        return model


def _window_tensor(model: nn.Module, window: WindowClip) -> torch.Tensor:
    p = next(model.parameters())
    imgs = torch.as_tensor(np.asarray(window.images), dtype=p.dtype, device=p.device)
    H, W = imgs.shape[1:3]
    if (H, W) != tuple(model.cfg.img_size):
        raise ShapeError(f"frames are {H}x{W}, model expects {model.cfg.img_size}")
    return imgs.unsqueeze(0)


@torch.no_grad()
def i2p_forward(model: I2PNet, window: WindowClip) -> I2POutput:
    """Run the network on one window (batch of one)."""
    key = select_keyframe(window)
    out = model(_window_tensor(model, window), key)
    out.frame_ids = list(window.frame_ids)
    return out


def canonical_scale(pointmaps: Sequence[Pointmap]) -> float:
    """Mean distance to the origin over every valid point of the window."""
    pts = [pm.valid_points() for pm in pointmaps]
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    if len(pts) == 0:
        raise EmptyWindowError("no valid points in window")
    z = float(np.linalg.norm(pts, axis=1).mean())
    if z == 0.0:
        raise DegenerateScaleError("all valid points sit at the origin")
    return z


def _scale_t(pts: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Per-batch-entry canonical scale of ``(B, L, H, W, 3)`` under ``valid``."""
    global scale_guard_hits
    w = valid.to(pts.dtype)
    n = w.sum(dim=(1, 2, 3))
    z = (pts.norm(dim=-1) * w).sum(dim=(1, 2, 3)) / n.clamp(min=1)
    low = z < SCALE_FLOOR
    if bool(low.any()):
        scale_guard_hits += int(low.sum())
        z = z.clamp(min=SCALE_FLOOR)
    return z


@dataclass
class LossValue:
    """``total`` sums over valid pixels; ``mean`` divides by their count."""

    total: torch.Tensor
    mean: torch.Tensor
    data: torch.Tensor
    n_valid: int


def _conf_loss(pred, conf, gt, valid, alpha) -> LossValue:
    if pred.shape != gt.shape or conf.shape != valid.shape or conf.shape != pred.shape[:-1]:
        raise ShapeError(f"loss shapes disagree: {tuple(pred.shape)} {tuple(conf.shape)} {tuple(gt.shape)} {tuple(valid.shape)}")
    valid = valid.bool()
    n = int(valid.sum())
    if n == 0:
        raise EmptySupervisionError("no valid ground-truth pixels")
    w = valid.to(pred.dtype)
    dist = (pred - gt).norm(dim=-1)
    data = (w * conf * dist).sum()
    total = data - alpha * (w * torch.log(conf)).sum()
    return LossValue(total, total / n, data, n)


def _batched(x, dims):
    return x if x.ndim == dims else x.unsqueeze(0)


def loss_i2p(pred_pts, pred_conf, gt_pts, gt_valid, alpha: float = 0.2) -> LossValue:
    """Confidence-weighted, canonical-scale-normalized pointmap loss.

    Shapes ``(B, L, H, W, ·)`` or unbatched ``(L, H, W, ·)``. Both prediction
    and ground truth are divided by their own window scale, computed over the
    ground-truth-valid pixels.
    """
    pred_pts, gt_pts = _batched(pred_pts, 5), _batched(gt_pts, 5)
    pred_conf, gt_valid = _batched(pred_conf, 4), _batched(gt_valid, 4)
    if not bool(gt_valid.any()):
        raise EmptySupervisionError("no valid ground-truth pixels")
    zp = _scale_t(pred_pts, gt_valid.bool()).view(-1, 1, 1, 1, 1)
    zg = _scale_t(gt_pts, gt_valid.bool()).view(-1, 1, 1, 1, 1)
    return _conf_loss(pred_pts / zp, pred_conf, gt_pts / zg, gt_valid, alpha)


def stack_pointmaps(pointmaps: Sequence[Pointmap], dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    pts = torch.as_tensor(np.stack([pm.points for pm in pointmaps]), dtype=dtype)
    valid = torch.as_tensor(np.stack([pm.valid for pm in pointmaps]))
    return pts, valid
