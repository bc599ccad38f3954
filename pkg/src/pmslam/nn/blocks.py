"""Transformer building blocks.

Token grids are tensors shaped ``(..., T, d)`` with ``T = (H/p)·(W/p)``
tokens laid out row-major over the patch grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import EmptySupportError, ShapeError

CONF_CLAMP = 30.0


@dataclass(frozen=True)
class BlockConfig:
    """Widths and depths shared by the encoder/decoder stacks.

    Desk-scale defaults: d=64, 4 heads, patch 8, 4 encoder and 4 decoder
    blocks on 64×64 inputs.
    """

    d: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    p: int = 8
    m: int = 4
    n: int = 4
    img_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if min(self.d, self.heads, self.p, self.m, self.n) <= 0 or self.mlp_ratio <= 0:
            raise ValueError("all BlockConfig sizes must be positive")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 4:
            raise ValueError("d must be divisible by 4 for the 2D sinusoidal code")
        h, w = self.img_size
        if h % self.p or w % self.p:
            raise ShapeError(f"image {h}x{w} not divisible by patch {self.p}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.img_size[0] // self.p, self.img_size[1] // self.p

    @property
    def tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def as_list(self) -> list[float]:
        return [self.d, self.heads, self.mlp_ratio, self.p, self.m, self.n, *self.img_size]

    @classmethod
    def from_list(cls, vals) -> BlockConfig:
        d, heads, mlp_ratio, p, m, n, h, w = vals
        return cls(int(d), int(heads), float(mlp_ratio), int(p), int(m), int(n), (int(h), int(w)))


def sincos_2d(d: int, grid: tuple[int, int]) -> np.ndarray:
    """Fixed 2D sine-cosine position code, ``(rows*cols, d)``.

    First half of the channels encodes the row, second half the column.
    """
    gh, gw = grid
    half = d // 2
    omega = 1.0 / 10000 ** (np.arange(half // 2, dtype=np.float64) / (half / 2.0))

    def code(pos):
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    return np.concatenate([code(rows.ravel()), code(cols.ravel())], axis=1)


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """``(..., H, W, C) -> (..., T, p*p*C)``; patch pixels row-major, channel last."""
    *lead, H, W, C = x.shape
    if H % p or W % p:
        raise ShapeError(f"{H}x{W} not divisible by patch size {p}")
    x = x.reshape(*lead, H // p, p, W // p, p, C)
    x = x.transpose(-4, -3)  # (..., gh, gw, p, p, C)
    return x.reshape(*lead, (H // p) * (W // p), p * p * C)


def unpatchify(x: torch.Tensor, p: int, grid: tuple[int, int], channels: int) -> torch.Tensor:
    """Inverse of :func:`patchify`: ``(..., T, p*p*C) -> (..., H, W, C)``."""
    gh, gw = grid
    *lead, T, _ = x.shape
    if T != gh * gw:
        raise ShapeError(f"{T} tokens do not form a {gh}x{gw} grid")
    x = x.reshape(*lead, gh, gw, p, p, channels).transpose(-4, -3)
    return x.reshape(*lead, gh * p, gw * p, channels)


def _init_linear(layer: nn.Linear, generator: torch.Generator | None = None) -> None:
    with torch.no_grad():
        nn.init.trunc_normal_(layer.weight, std=0.02, a=-0.04, b=0.04, generator=generator)
        if layer.bias is not None:
            layer.bias.zero_()


def init_weights(module: nn.Module, seed: int = 0) -> None:
    """Truncated-normal (σ=0.02) projections, zero biases, unit LayerNorms."""
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Linear):
            _init_linear(m, g)
        elif isinstance(m, nn.LayerNorm) and m.elementwise_affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


class PatchEmbed(nn.Module):
    """Linear projection of non-overlapping p×p patches, optional fixed position code."""

    def __init__(self, p: int, d: int, grid: tuple[int, int], in_ch: int = 3, pos_code: bool = True):
        super().__init__()
        self.p, self.grid, self.in_ch = p, grid, in_ch
        self.proj = nn.Linear(p * p * in_ch, d)
        if pos_code:
            self.register_buffer("pos", torch.from_numpy(sincos_2d(d, grid)), persistent=False)
        else:
            self.pos = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_ch:
            raise ShapeError(f"expected {self.in_ch} channels, got {x.shape[-1]}")
        H, W = x.shape[-3:-1]
        if (H // self.p, W // self.p) != self.grid or H % self.p or W % self.p:
            raise ShapeError(f"input {H}x{W} does not match grid {self.grid} with patch {self.p}")
        tok = self.proj(patchify(x, self.p))
        if self.pos is not None:
            tok = tok + self.pos.to(tok.dtype)
        return tok


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with output projection."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.d, self.heads = d, heads
        self.q = nn.Linear(d, d)
        # a key bias only shifts every logit of a query equally; softmax ignores it
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d)
        self.proj = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, kv: torch.Tensor | None = None) -> torch.Tensor:
        kv = x if kv is None else kv
        if x.shape[-1] != self.d or kv.shape[-1] != self.d:
            raise ShapeError(f"attention width mismatch: {x.shape[-1]} / {kv.shape[-1]} vs d={self.d}")
        h, dh = self.heads, self.d // self.heads
        q = self.q(x).unflatten(-1, (h, dh)).transpose(-3, -2)
        k = self.k(kv).unflatten(-1, (h, dh)).transpose(-3, -2)
        v = self.v(kv).unflatten(-1, (h, dh)).transpose(-3, -2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (att @ v).transpose(-3, -2).flatten(-2)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, d: int, ratio: float):
        super().__init__()
        hidden = int(round(d * ratio))
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + GELU feed-forward, both residual."""

    def __init__(self, d: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, eps=1e-6)
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d, eps=1e-6)
        self.mlp = Mlp(d, mlp_ratio)

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y)
        return x + self.mlp(self.norm2(x))


class MultiviewDecoderBlock(nn.Module):
    """Decoder block whose cross-attention spans any number of supports.

    One shared cross-attention is applied to each support separately; the
    projected outputs are reduced by an elementwise max before the residual
    add. With a single support this is an ordinary two-view decoder block.
    """

    def __init__(self, d: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, eps=1e-6)
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d, eps=1e-6)
        self.norm_y = nn.LayerNorm(d, eps=1e-6)
        self.cross_attn = Attention(d, heads)
        self.norm3 = nn.LayerNorm(d, eps=1e-6)
        self.mlp = Mlp(d, mlp_ratio)

    def forward(self, x: torch.Tensor, supports) -> torch.Tensor:
        """``x``: ``(..., T, d)``; ``supports``: sequence of ``(..., T', d)`` tensors."""
        if len(supports) == 0:
            raise EmptySupportError("multi-view decoder block needs at least one support")
        y = self.norm1(x)
        x = x + self.attn(y, y)
        q = self.norm2(x)
        # supports are visited one at a time so every branch sees identical
        # shapes; this keeps the max reduction bitwise order-independent
        agg = None
        for s in supports:
            out = self.cross_attn(q, self.norm_y(s))
            agg = out if agg is None else torch.maximum(agg, out)
        x = x + agg
        return x + self.mlp(self.norm3(x))


class RegressionHead(nn.Module):
    """Linear map to ``p·p·4`` channels per token, un-patchified to points + confidence."""

    def __init__(self, d: int, p: int, grid: tuple[int, int]):
        super().__init__()
        self.p, self.grid = p, grid
        self.proj = nn.Linear(d, p * p * 4)

    def forward(self, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if g.shape[-2] != self.grid[0] * self.grid[1]:
            raise ShapeError(f"{g.shape[-2]} tokens do not match grid {self.grid}")
        out = unpatchify(self.proj(g), self.p, self.grid, 4)
        pts = out[..., :3]
        conf = 1.0 + torch.exp(out[..., 3].clamp(max=CONF_CLAMP))
        return pts, conf
