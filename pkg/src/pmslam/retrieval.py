"""Reservoir-sampled buffer of scene frames and the retrieval head."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyBufferError, ShapeError
from .i2p import I2PNet
from .l2w import SceneFrame
from .nn.blocks import _init_linear
from .nn.checkpoint import load_tensors, save_module


class BufferSet:
    """At most ``capacity`` scene frames, kept as a uniform reservoir sample.

    The i-th offer (1-based) is always inserted while there is room, and
    afterwards with probability ``capacity / i``, evicting a uniformly chosen
    entry.
    """

    def __init__(self, capacity: int = 100, seed: int | None = 0):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[SceneFrame] = []
        self.seen = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> list[int]:
        return [e.id for e in self.entries]

    def offer(self, frame) -> bool:
        return reservoir_offer(self, frame)

    def dump(self) -> str:
        """One line per entry: id, recon_score, mean confidence."""
        lines = []
        for e in sorted(self.entries, key=lambda e: e.id):
            lines.append(f"{e.id} {e.recon_score:.6g} {float(np.mean(e.confidence)):.6g}")
        return "\n".join(lines) + ("\n" if lines else "")


def reservoir_offer(buffer: BufferSet, frame) -> bool:
    buffer.seen += 1
    if len(buffer.entries) < buffer.capacity:
        buffer.entries.append(frame)
        return True
    j = int(buffer.rng.integers(buffer.seen))
    if j < buffer.capacity:
        buffer.entries[j] = frame
        return True
    return False


def periodic_buffer_update(buffer: BufferSet, recent_keyframes: Sequence[SceneFrame], keep_fraction: float = 0.5) -> list[int]:
    """Offer the best-scoring recent keyframes to the reservoir.

    Candidates are ranked by ``recon_score`` (ties: lower id first) and the
    top ``ceil(keep_fraction * n)`` are offered in rank order. Returns the
    ids that were inserted.
    """
    ranked = sorted(recent_keyframes, key=lambda f: (-f.recon_score, f.id))
    n_offer = math.ceil(keep_fraction * len(ranked)) if ranked else 0
    return [f.id for f in ranked[:n_offer] if reservoir_offer(buffer, f)]


class RetrievalHead(nn.Module):
    """First ``r`` I2P decoder blocks + linear projection + average pooling.

    The decoder blocks are the I2P model's own modules (shared storage,
    frozen here); only ``proj`` is trainable.
    """

    kind = "RET"

    def __init__(self, i2p: I2PNet, r: int = 2, seed: int = 0):
        super().__init__()
        if not 1 <= r <= len(i2p.key_blocks):
            raise ValueError(f"retrieval depth r={r} must be in [1, {len(i2p.key_blocks)}]")
        self.r = r
        # plain attribute: keeps the backbone out of this module's parameters
        object.__setattr__(self, "i2p", i2p)
        self.proj = nn.Linear(i2p.cfg.d, 1)
        _init_linear(self.proj, torch.Generator().manual_seed(seed))

    def pooled(self, key_feat: torch.Tensor, scene_feats: torch.Tensor) -> torch.Tensor:
        """Token-averaged backbone output per pair, ``(..., N, d)``.

        ``key_feat (..., T, d)``, ``scene_feats (..., N, T, d)``. Each pair
        runs ``r`` lockstep blocks of both I2P decoders; the scene frame's
        side is what gets scored.
        """
        key = key_feat.unsqueeze(-3).expand_as(scene_feats)
        sce = scene_feats
        for j in range(self.r):
            new_key = self.i2p.key_blocks[j](key, [sce])
            sce = self.i2p.sup_blocks[j](sce, [key])
            key = new_key
        return F.layer_norm(sce, sce.shape[-1:]).mean(-2)

    def raw_scores(self, key_feat: torch.Tensor, scene_feats: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid scores ``(..., N)``; the projection is linear, so pooling first is equivalent."""
        return self.proj(self.pooled(key_feat, scene_feats)).squeeze(-1)

    def forward(self, key_feat, scene_feats):
        return torch.sigmoid(self.raw_scores(key_feat, scene_feats))

    def save(self, path) -> None:
        save_module(path, self.proj, self.kind, [self.r])

    @classmethod
    def load(cls, path, i2p: I2PNet) -> RetrievalHead:
        config, state = load_tensors(path, cls.kind)
        head = cls(i2p, int(config[0]))
        head.proj.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
        return head


@torch.no_grad()
def retrieval_scores(head: RetrievalHead, key_feature: torch.Tensor, buffer) -> list[tuple[int, float]]:
    """``(id, score)`` for every buffered frame, scores in (0, 1)."""
    entries = list(buffer)
    if not entries:
        raise EmptyBufferError("retrieval against an empty buffer")
    p = head.proj.weight
    feats = torch.stack([torch.as_tensor(e.feature, dtype=p.dtype) for e in entries])
    key = torch.as_tensor(key_feature, dtype=p.dtype)
    s = head(key, feats)
    return [(e.id, float(v)) for e, v in zip(entries, s)]


def normalized_confidence(conf) -> torch.Tensor:
    """Mean of ``(C - 1) / C`` over the last two (pixel) dimensions."""
    conf = torch.as_tensor(conf)
    return ((conf - 1.0) / conf).mean(dim=(-2, -1))


def loss_retrieval(pred_scores, i2p_confidences) -> torch.Tensor:
    """``sum_i |sigmoid(S_i) - mean((C_i - 1) / C_i)|`` over supporting frames."""
    pred_scores = torch.as_tensor(pred_scores)
    if isinstance(i2p_confidences, (list, tuple)):
        i2p_confidences = torch.stack([torch.as_tensor(c, dtype=pred_scores.dtype) for c in i2p_confidences])
    if pred_scores.shape != i2p_confidences.shape[:-2]:
        raise ShapeError(f"{tuple(pred_scores.shape)} scores vs {tuple(i2p_confidences.shape)} confidence maps")
    target = normalized_confidence(i2p_confidences).to(pred_scores.dtype)
    return (torch.sigmoid(pred_scores) - target).abs().sum()


def top_k_scene_frames(
    buffer,
    keyframes: Sequence[torch.Tensor],
    K: int,
    scorer,
    exclude: set | None = None,
) -> list[SceneFrame]:
    """The ``K`` entries with the highest score summed over all keyframes.

    ``scorer(key_feature, buffer) -> [(id, score)]``, e.g.
    ``functools.partial(retrieval_scores, head)``. Ties go to the lower id.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    entries = [e for e in buffer if not exclude or e.id not in exclude]
    if not entries:
        raise EmptyBufferError("no scene frames to retrieve from")
    totals = {e.id: 0.0 for e in entries}
    for kf in keyframes:
        for fid, s in scorer(kf, entries):
            totals[fid] += s
    ranked = sorted(entries, key=lambda e: (-totals[e.id], e.id))
    return ranked[:K]
