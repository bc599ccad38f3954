"""Gradient checks for every trainable block, loss and full network at small width."""

from __future__ import annotations

from typing import Callable

import torch

from .i2p import I2PNet, loss_i2p
from .l2w import L2WNet, loss_l2w
from .nn import Attention, BlockConfig, EncoderBlock, MultiviewDecoderBlock, PatchEmbed, RegressionHead, grad_check, module_grad_check
from .retrieval import loss_retrieval

TOLERANCE = 1e-4


def _rand(g, *shape, scale=1.0):
    return torch.randn(*shape, generator=g, dtype=torch.float64) * scale


def _perturb(module: torch.nn.Module, g, scale=0.1):
    # freshly initialized LayerNorms/biases sit at symmetric points; jiggle them
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def gradcheck_suite(d: int = 16, seed: int = 0, eps: float = 1e-4, n_coords: int = 256) -> dict[str, float]:
    """Max relative error per check (float64 throughout)."""
    g = torch.Generator().manual_seed(seed)
    T, heads = 4, 2
    cfg = BlockConfig(d=d, heads=heads, mlp_ratio=2.0, p=4, m=1, n=2, img_size=(8, 8))
    checks: dict[str, Callable[[], float]] = {}

    def mod_check(module, loss, *inputs):
        module = _perturb(module.double(), g)
        return module_grad_check(module, loss, inputs, n_coords=n_coords, eps=eps, seed=seed)

    x, y, z = _rand(g, T, d), _rand(g, T + 1, d), _rand(g, T + 2, d)

    attn = Attention(d, heads)
    checks["attention"] = lambda: mod_check(attn, lambda a, b: (attn(a, b) ** 2).sum(), x, y)
    enc = EncoderBlock(d, heads, 2.0)
    checks["encoder_block"] = lambda: mod_check(enc, lambda a: enc(a).sum(), x)
    dec = MultiviewDecoderBlock(d, heads, 2.0)
    checks["multiview_decoder_block"] = lambda: mod_check(dec, lambda a, b, c: (dec(a, [b, c]) ** 2).sum(), x, y, z)
    emb = PatchEmbed(cfg.p, d, cfg.grid)
    img = torch.rand(8, 8, 3, generator=g, dtype=torch.float64)
    checks["patch_embed"] = lambda: mod_check(emb, lambda a: (emb(a) ** 2).sum(), img)
    head = RegressionHead(d, cfg.p, cfg.grid)
    checks["regression_head"] = lambda: mod_check(head, lambda a: sum(t.sum() for t in head(a)), x)

    pts, gt = _rand(g, 2, 8, 8, 3), _rand(g, 2, 8, 8, 3)
    conf = 1 + torch.rand(2, 8, 8, generator=g, dtype=torch.float64) * 3
    valid = torch.rand(2, 8, 8, generator=g) > 0.2
    checks["loss_i2p"] = lambda: grad_check(lambda p, c: loss_i2p(p, c, gt, valid).mean, [pts, conf], eps, n_coords, seed)
    checks["loss_l2w"] = lambda: grad_check(lambda p, c: loss_l2w(p, c, gt, valid).mean, [pts, conf], eps, n_coords, seed)
    raw = _rand(g, 2)
    checks["loss_retrieval"] = lambda: grad_check(lambda s: loss_retrieval(s, conf), [raw], eps, n_coords, seed)

    i2p = I2PNet(cfg, seed)
    imgs = torch.rand(1, 3, 8, 8, 3, generator=g, dtype=torch.float64)
    gt3 = _rand(g, 1, 3, 8, 8, 3)
    v3 = torch.ones(1, 3, 8, 8, dtype=torch.bool)

    def i2p_loss(im):
        out = i2p(im, 1)
        return loss_i2p(out.points, out.conf, gt3, v3).mean

    checks["i2p_forward_backward"] = lambda: mod_check(i2p, i2p_loss, imgs)

    l2w = L2WNet(cfg, seed)
    kf, sf = _rand(g, 1, 2, cfg.tokens, d), _rand(g, 1, 2, cfg.tokens, d)
    kp, sp = _rand(g, 1, 2, 8, 8, 3), _rand(g, 1, 2, 8, 8, 3)
    gt4, v4 = _rand(g, 1, 4, 8, 8, 3), torch.ones(1, 4, 8, 8, dtype=torch.bool)

    def l2w_loss(a, b, c, e):
        out = l2w(a, b, c, e)
        return loss_l2w(out.points, out.conf, gt4, v4).mean

    checks["l2w_forward_backward"] = lambda: mod_check(l2w, l2w_loss, kf, kp, sf, sp)
    return {name: fn() for name, fn in checks.items()}
