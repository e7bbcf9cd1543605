"""Convolution, pooling and normalization on NCHW tensors.

Convolution lowers to one matrix multiply through im2col. Output side is
``(side + 2*padding - dilation*(kernel-1) - 1) // stride + 1``, the usual
formula, and a non-positive result is an error rather than an empty tensor.
Backward scatters column gradients back with col2im.
"""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .tensor import Tensor, apply_op

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def output_size(side: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (side + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def im2col(
    x: np.ndarray,
    kh: int,
    kw: int,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    pad_value: float = 0.0,
) -> Tuple[np.ndarray, int, int]:
    """Unfold `x` (N, C, H, W) into columns of shape (N, C*kh*kw, OH*OW)."""
    n, c, h, w = x.shape
    oh = output_size(h, kh, stride, padding, dilation)
    ow = output_size(w, kw, stride, padding, dilation)
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"kernel {kh}x{kw} (dilation {dilation}, padding {padding}) does not fit a {h}x{w} input"
        )
    if padding:
        x = np.pad(
            x,
            ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            mode="constant",
            constant_values=pad_value,
        )
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        top = i * dilation
        for j in range(kw):
            left = j * dilation
            cols[:, :, i, j] = x[:, :, top : top + stride * oh : stride, left : left + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def col2im(
    cols: np.ndarray,
    shape: Tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> np.ndarray:
    """Adjoint of im2col: sum every column entry back into its input pixel."""
    n, c, h, w = shape
    oh = output_size(h, kh, stride, padding, dilation)
    ow = output_size(w, kw, stride, padding, dilation)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        top = i * dilation
        for j in range(kw):
            left = j * dilation
            out[:, :, top : top + stride * oh : stride, left : left + stride * ow : stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups or cg * groups != c:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels, weight {weight.shape}, groups={groups}"
        )
    cols, oh, ow = im2col(x.data, kh, kw, stride, padding, dilation)
    k = cg * kh * kw
    cols = cols.reshape(n, groups, k, oh * ow)
    wmat = weight.data.reshape(groups, o // groups, k)
    out = np.matmul(wmat, cols).reshape(n, o, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gm = g.reshape(n, groups, o // groups, oh * ow)
        gw = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.transpose(0, 2, 1), gm)
            gx = col2im(gcols, x.shape, kh, kw, stride, padding, dilation)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return apply_op("conv2d", out, parents, backward)


def max_pool2d(x: Tensor, kernel_size: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Max over each window; padded cells never win."""
    n, c, _, _ = x.shape
    k = kernel_size
    cols, oh, ow = im2col(x.data, k, k, stride, padding, 1, pad_value=-np.inf)
    windows = cols.reshape(n, c, k * k, oh, ow)
    winner = windows.argmax(axis=2)[:, :, None]
    out = np.take_along_axis(windows, winner, axis=2)[:, :, 0]

    def backward(g):
        gcols = np.zeros_like(windows)
        np.put_along_axis(gcols, winner, g[:, :, None], axis=2)
        return (col2im(gcols, x.shape, k, k, stride, padding, 1),)

    return apply_op("max_pool2d", out, (x,), backward)


def avg_pool2d(x: Tensor, kernel_size: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Window mean over real pixels only (padding is not counted)."""
    n, c, h, w = x.shape
    k = kernel_size
    cols, oh, ow = im2col(x.data, k, k, stride, padding, 1)
    ones, _, _ = im2col(np.ones((1, 1, h, w), dtype=x.data.dtype), k, k, stride, padding, 1)
    count = ones.reshape(1, 1, k * k, oh, ow).sum(axis=2)
    out = cols.reshape(n, c, k * k, oh, ow).sum(axis=2) / count

    def backward(g):
        spread = np.broadcast_to((g / count)[:, :, None], (n, c, k * k, oh, ow))
        return (col2im(np.ascontiguousarray(spread), x.shape, k, k, stride, padding, 1),)

    return apply_op("avg_pool2d", out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


def batch_norm(
    x: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    weight: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization of (N, C, H, W).

    Training mode uses batch statistics and updates the running estimates in
    place (the variance estimate is unbiased); eval mode uses the estimates.
    """
    n, c, h, w = x.shape
    axes = (0, 2, 3)
    m = n * h * w
    if training:
        if m < 2:
            raise ValueError(
                f"batch norm in training mode needs at least 2 values per channel, got {m}"
            )
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype).reshape(1, c, 1, 1)
    xhat = (x.data - mean.reshape(1, c, 1, 1).astype(x.data.dtype)) * inv_std
    out = xhat
    if weight is not None:
        out = out * weight.data.reshape(1, c, 1, 1) + bias.data.reshape(1, c, 1, 1)

    def backward(g):
        gxhat = g * weight.data.reshape(1, c, 1, 1) if weight is not None else g
        if training:
            gx = (inv_std / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std
        if weight is None:
            return (gx,)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    parents = (x,) if weight is None else (x, weight, bias)
    return apply_op("batch_norm", out, parents, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """`x @ weight.T + bias` with weight laid out (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: {x.shape} against weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return apply_op("linear", out, parents, backward)
