"""Convolution, normalization, and dropout built on the tensor engine.

Convolutions run through an unfold/fold pair: nine strided slice copies per
3x3 kernel instead of per-pixel loops, so both directions stay vectorized.
Output extents follow standard floor semantics,
``H' = floor((H + 2*padding - kh) / stride) + 1``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ConfigurationError, DimensionError, StateError
from .tensor import Tensor, as_tensor


def _unfold(padded: np.ndarray, kh: int, kw: int, stride: int):
    """Extract sliding 2-D patches: [B,C,Hp,Wp] -> [B,C,kh*kw,Ho*Wo]."""
    b, c, hp, wp = padded.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((b, c, kh * kw, ho * wo), dtype=np.float64)
    tap = 0
    for i in range(kh):
        for j in range(kw):
            window = padded[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
            cols[:, :, tap, :] = window.reshape(b, c, ho * wo)
            tap += 1
    return cols, ho, wo


def _fold_add(dcols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int):
    """Scatter-add patch gradients back onto the padded input layout."""
    b, c, hp, wp = shape
    out = np.zeros(shape, dtype=np.float64)
    tap = 0
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[
                :, :, tap, :
            ].reshape(b, c, ho, wo)
            tap += 1
    return out


def _check_conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"kernel extents must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"padding must be >= 0, got {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ConfigurationError(
            f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        )


def depthwise_conv2d(
    x,
    kernel,
    bias=None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Per-channel 2-D convolution: channel c sees only kernel c.

    ``x`` is [B,C,H,W], ``kernel`` is [C,kh,kw], ``bias`` is [C] or None.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"depthwise_conv2d input must be 4-D, got {x.shape}")
    if kernel.ndim != 3 or kernel.shape[0] != x.shape[1]:
        raise DimensionError(
            f"kernel {kernel.shape} incompatible with input {x.shape}"
        )
    b, c, h, w = x.shape
    _, kh, kw = kernel.shape
    _check_conv_geometry(h, w, kh, kw, stride, padding)

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _unfold(padded, kh, kw, stride)
    flat_kernel = kernel.data.reshape(c, kh * kw)
    out = np.einsum("bckl,ck->bcl", cols, flat_kernel, optimize=True)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c,):
            raise DimensionError(f"bias {bias.shape} must be ({c},)")
        out = out + bias.data[:, None]
        parents.append(bias)
    data = out.reshape(b, c, ho, wo)

    def vjp(g):
        gl = g.reshape(b, c, ho * wo)
        dkernel = np.einsum("bckl,bcl->ck", cols, gl, optimize=True).reshape(kernel.shape)
        dcols = flat_kernel[None, :, :, None] * gl[:, :, None, :]
        dpad = _fold_add(dcols, padded.shape, kh, kw, stride, ho, wo)
        dx = dpad[:, :, padding : padding + h, padding : padding + w]
        grads = [(x, dx), (kernel, dkernel)]
        if bias is not None:
            grads.append((bias, gl.sum(axis=(0, 2))))
        return grads

    return Tensor._result(data, tuple(parents), "depthwise_conv2d", vjp)


def conv2d(
    x,
    kernel,
    bias=None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Full 2-D convolution; ``kernel`` is [Cout,Cin,kh,kw]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(
            f"kernel {kernel.shape} incompatible with input {x.shape}"
        )
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    _check_conv_geometry(h, w, kh, kw, stride, padding)

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _unfold(padded, kh, kw, stride)
    cols2 = cols.reshape(b, cin * kh * kw, ho * wo)
    flat_kernel = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(flat_kernel[None], cols2)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"bias {bias.shape} must be ({cout},)")
        out = out + bias.data[:, None]
        parents.append(bias)
    data = out.reshape(b, cout, ho, wo)

    def vjp(g):
        gl = g.reshape(b, cout, ho * wo)
        dkernel = np.einsum("bol,bil->oi", gl, cols2, optimize=True).reshape(kernel.shape)
        dcols2 = np.matmul(flat_kernel.T[None], gl)
        dpad = _fold_add(
            dcols2.reshape(b, cin, kh * kw, ho * wo), padded.shape, kh, kw, stride, ho, wo
        )
        dx = dpad[:, :, padding : padding + h, padding : padding + w]
        grads = [(x, dx), (kernel, dkernel)]
        if bias is not None:
            grads.append((bias, gl.sum(axis=(0, 2))))
        return grads

    return Tensor._result(data, tuple(parents), "conv2d", vjp)


class RunningStats:
    """Exponential-moving-average batch statistics for one normalization layer."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)
        self.momentum = float(momentum)
        self.initialized = False

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        if not self.initialized:
            self.mean = batch_mean.copy()
            self.var = batch_var.copy()
            self.initialized = True
        else:
            m = self.momentum
            self.mean = (1.0 - m) * self.mean + m * batch_mean
            self.var = (1.0 - m) * self.var + m * batch_var


def batch_norm(
    x,
    gamma,
    beta,
    stats: RunningStats,
    training: bool,
    eps: float = 1e-5,
    axis: int = 1,
) -> Tensor:
    """Per-channel normalization with learnable scale and shift.

    Training mode normalizes by the batch moments and folds them into
    ``stats``; eval mode is a pure affine function of the stored moments.
    """
    if eps <= 0:
        raise ConfigurationError(f"batch_norm eps must be > 0, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axis = axis % x.ndim
    channels = x.shape[axis]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"gamma/beta must be ({channels},), got {gamma.shape} and {beta.shape}"
        )
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    shape = [1] * x.ndim
    shape[axis] = channels
    gview = gamma.data.reshape(shape)
    bview = beta.data.reshape(shape)

    if training:
        mu = x.data.mean(axis=reduce_axes)
        var = x.data.var(axis=reduce_axes)
        stats.update(mu, var)
        inv_std = 1.0 / np.sqrt(var.reshape(shape) + eps)
        xhat = (x.data - mu.reshape(shape)) * inv_std
        data = gview * xhat + bview
        n = x.data.size // channels

        def vjp(g):
            dxhat = g * gview
            sum_dxhat = dxhat.sum(axis=reduce_axes, keepdims=True)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=reduce_axes, keepdims=True)
            dx = (inv_std / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
            return [
                (x, dx),
                (gamma, (g * xhat).sum(axis=reduce_axes)),
                (beta, g.sum(axis=reduce_axes)),
            ]

    else:
        if not stats.initialized:
            raise StateError(
                "batch_norm called in eval mode before running stats were populated"
            )
        inv_std = 1.0 / np.sqrt(stats.var.reshape(shape) + eps)
        mu = stats.mean.reshape(shape)
        xhat = (x.data - mu) * inv_std
        data = gview * xhat + bview

        def vjp(g):
            return [
                (x, g * gview * inv_std),
                (gamma, (g * xhat).sum(axis=reduce_axes)),
                (beta, g.sum(axis=reduce_axes)),
            ]

    return Tensor._result(data, (x, gamma, beta), "batch_norm", vjp)


def dropout(x, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: train-time survivors are scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        def vjp_identity(g):
            return [(x, g)]

        return Tensor._result(x.data, (x,), "dropout_eval", vjp_identity)
    if rng is None:
        raise ConfigurationError("dropout in training mode requires an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    data = x.data * mask

    def vjp(g):
        return [(x, g * mask)]

    return Tensor._result(data, (x,), "dropout", vjp)
