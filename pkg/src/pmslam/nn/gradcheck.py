"""Reverse-mode vs central-difference gradient comparison."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

from ..errors import InvalidEpsilonError, NumericError


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-6,
    n_coords: int = 64,
    seed: int = 0,
    clone: bool = True,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn(*inputs)`` must return a scalar. Compares on a random subsample of
    at least ``n_coords`` coordinates (all of them if there are fewer) with
    relative error ``|a - n| / max(|a|, |n|, 1e-8)``. Run in float64.
    With ``clone=False`` the given leaf tensors are perturbed in place (and
    restored), which lets closures read module parameters directly.
    """
    if not eps > 0:
        raise InvalidEpsilonError(f"eps must be positive, got {eps}")
    if clone:
        inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    if out.numel() != 1:
        raise ValueError("grad_check closure must return a scalar")
    if not torch.isfinite(out).all():
        raise NumericError("non-finite loss in grad_check")
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, analytic)]

    sizes = [x.numel() for x in inputs]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_coords else rng.choice(total, size=n_coords, replace=False)
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    with torch.no_grad():
        for flat in np.sort(picks):
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[which])
            x = inputs[which].view(-1)
            orig = x[j].item()
            x[j] = orig + eps
            fp = fn(*inputs).item()
            x[j] = orig - eps
            fm = fn(*inputs).item()
            x[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite loss during finite differencing")
            num = (fp - fm) / (2 * eps)
            ana = analytic[which].reshape(-1)[j].item()
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst


def module_grad_check(module: torch.nn.Module, loss_fn, extra_inputs=(), n_coords: int = 64, eps: float = 1e-6, seed: int = 0) -> float:
    """:func:`grad_check` over a module's parameters plus ``extra_inputs``.

    ``loss_fn(*extra_inputs)`` must close over ``module``.
    """
    extras = [x.detach().clone().requires_grad_(True) for x in extra_inputs]
    params = [p for p in module.parameters() if p.requires_grad]
    return grad_check(
        lambda *_: loss_fn(*extras), [*params, *extras], eps=eps, n_coords=n_coords, seed=seed, clone=False
    )
