"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor

# Relative error denominators are floored so that near-zero gradients compare
# on an absolute scale instead of dividing noise by noise.
DENOM_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float, floor: float = DENOM_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numerical_gradient(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    flat_index: int,
    h: float = 1e-5,
) -> float:
    """Central difference of ``loss_fn`` w.r.t. one scalar entry of ``param``.

    ``loss_fn`` must rebuild its forward pass from current tensor data and be
    deterministic (frozen normalization stats, no stochastic ops).
    """
    flat = param.data.reshape(-1)
    original = flat[flat_index]
    flat[flat_index] = original + h
    plus = float(loss_fn().data)
    flat[flat_index] = original - h
    minus = float(loss_fn().data)
    flat[flat_index] = original
    return (plus - minus) / (2.0 * h)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    sample_fraction: float = 1.0,
    min_per_tensor: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare reverse-mode gradients against central differences.

    Returns the maximum relative error over all sampled parameter entries.
    ``sample_fraction`` < 1 checks a random subset (at least
    ``min_per_tensor`` entries per tensor).
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, grad in zip(params, analytic):
        n = p.data.size
        k = min(n, max(min_per_tensor, math.ceil(sample_fraction * n)))
        if k == n:
            indices = np.arange(n)
        else:
            indices = rng.choice(n, size=k, replace=False)
        flat_grad = grad.reshape(-1)
        for idx in indices:
            numeric = numerical_gradient(loss_fn, p, int(idx), h=h)
            worst = max(worst, relative_error(float(flat_grad[idx]), numeric))
    return worst
