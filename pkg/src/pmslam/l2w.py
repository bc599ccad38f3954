"""Local-to-world network: registers keyframe pointmaps against scene frames."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import EmptyReferenceError, ShapeError
from .geometry import Pointmap
from .i2p import LossValue, _batched, _conf_loss
from .nn.blocks import BlockConfig, MultiviewDecoderBlock, PatchEmbed, RegressionHead, init_weights
from .nn.checkpoint import load_tensors, save_module


@dataclass
class SceneFrame:
    """A registered keyframe kept as a global reference."""

    id: int
    feature: torch.Tensor  # (T, d) encoder tokens
    global_points: Pointmap
    confidence: np.ndarray  # (H, W), >= 1
    recon_score: float
    image: np.ndarray | None = None


def recon_score(i2p_conf, l2w_conf) -> float:
    """Product of the frame's mean I2P and mean L2W confidence."""
    return float(np.mean(i2p_conf)) * float(np.mean(l2w_conf))


@dataclass
class L2WOutput:
    """World-frame predictions: keyframes ``(B, Co, H, W, ·)``, scene frames ``(B, K, H, W, ·)``."""

    key_points: torch.Tensor
    key_conf: torch.Tensor
    scene_points: torch.Tensor
    scene_conf: torch.Tensor

    @property
    def points(self) -> torch.Tensor:
        """All outputs, scene frames first, along dim 1."""
        return torch.cat([self.scene_points, self.key_points], dim=1)

    @property
    def conf(self) -> torch.Tensor:
        return torch.cat([self.scene_conf, self.key_conf], dim=1)


def embed_points(embed: PatchEmbed, pts: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Patch-embed a pointmap; invalid points are zero-filled first."""
    if valid is not None:
        pts = pts * valid.unsqueeze(-1).to(pts.dtype)
    return embed(pts)


def fuse_tokens(visual: torch.Tensor, geometric: torch.Tensor) -> torch.Tensor:
    if visual.shape != geometric.shape:
        raise ShapeError(f"cannot fuse {tuple(visual.shape)} with {tuple(geometric.shape)}")
    return visual + geometric


class L2WNet(nn.Module):
    """Points embedding, registration decoder, scene decoder and heads."""

    kind = "L2W"

    def __init__(self, cfg: BlockConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or BlockConfig()
        self.cfg = cfg
        d, h, r = cfg.d, cfg.heads, cfg.mlp_ratio
        self.pts_embed = PatchEmbed(cfg.p, d, cfg.grid, pos_code=False)
        self.reg_blocks = nn.ModuleList([MultiviewDecoderBlock(d, h, r) for _ in range(cfg.n)])
        self.sce_blocks = nn.ModuleList([MultiviewDecoderBlock(d, h, r) for _ in range(cfg.n)])
        self.dec_norm = nn.LayerNorm(d, eps=1e-6)
        self.reg_head = RegressionHead(d, cfg.p, cfg.grid)
        self.sce_head = RegressionHead(d, cfg.p, cfg.grid)
        init_weights(self, seed + 1)

    def forward(
        self,
        key_feats: torch.Tensor,
        key_pts: torch.Tensor,
        scene_feats: torch.Tensor,
        scene_pts: torch.Tensor,
        key_valid: torch.Tensor | None = None,
        scene_valid: torch.Tensor | None = None,
        use_points: bool = True,
    ) -> L2WOutput:
        """Feats ``(B, N, T, d)``; pointmaps ``(B, N, H, W, 3)``.

        Keyframe pointmaps are local (I2P) predictions; scene-frame pointmaps
        are already in the world frame. Geometric tokens are added to the
        running state before the first block and again before every later one.
        """
        if key_feats.shape[1] == 0 or scene_feats.shape[1] == 0:
            raise EmptyReferenceError("L2W needs at least one keyframe and one scene frame")
        if use_points:
            pk = embed_points(self.pts_embed, key_pts, key_valid)
            ps = embed_points(self.pts_embed, scene_pts, scene_valid)
        else:
            pk = torch.zeros_like(key_feats)
            ps = torch.zeros_like(scene_feats)
        k = fuse_tokens(key_feats, pk)
        s = fuse_tokens(scene_feats, ps)
        for j, (reg, sce) in enumerate(zip(self.reg_blocks, self.sce_blocks)):
            if j > 0:
                k = k + pk
                s = s + ps
            new_k = reg(k, [s[:, i : i + 1] for i in range(s.shape[1])])
            s = sce(s, [k[:, c : c + 1] for c in range(k.shape[1])])
            k = new_k
        kp, kc = self.reg_head(self.dec_norm(k))
        sp, sc = self.sce_head(self.dec_norm(s))
        return L2WOutput(kp, kc, sp, sc)

    def save(self, path) -> None:
        save_module(path, self, self.kind, self.cfg.as_list())

    @classmethod
    def load(cls, path) -> L2WNet:
        config, state = load_tensors(path, cls.kind)
        model = cls(BlockConfig.from_list(config))
        model.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
        return model


@torch.no_grad()
def l2w_forward(model: L2WNet, keyframes: Sequence[tuple[torch.Tensor, Pointmap]], scene_frames: Sequence[SceneFrame]) -> L2WOutput:
    """Register ``(feature, local pointmap)`` keyframes against scene frames (batch of one)."""
    if not keyframes or not scene_frames:
        raise EmptyReferenceError("L2W needs at least one keyframe and one scene frame")
    p = next(model.parameters())

    def pack(feats, pms):
        f = torch.stack([torch.as_tensor(x, dtype=p.dtype) for x in feats]).unsqueeze(0)
        pts = torch.as_tensor(np.stack([pm.points for pm in pms]), dtype=p.dtype).unsqueeze(0)
        valid = torch.as_tensor(np.stack([pm.valid for pm in pms])).unsqueeze(0)
        return f, pts, valid

    kf, kp, kv = pack([f for f, _ in keyframes], [pm for _, pm in keyframes])
    sf, sp, sv = pack([s.feature for s in scene_frames], [s.global_points for s in scene_frames])
    return model(kf, kp, sf, sp, kv, sv)


def loss_l2w(pred_pts, pred_conf, gt_pts, gt_valid, alpha: float = 0.2) -> LossValue:
    """Confidence-weighted pointmap loss without any scale normalization."""
    return _conf_loss(
        _batched(pred_pts, 5), _batched(pred_conf, 4), _batched(gt_pts, 5), _batched(gt_valid, 4), alpha
    )
