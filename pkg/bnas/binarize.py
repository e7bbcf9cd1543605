"""Binary convolution with scaling factors.

A float convolution ``W * A`` is approximated as ``(sign(A) * sign(W)) ⊙ βK``:

* β (one per output filter) is the mean absolute weight of that filter.
* K (one per output position) is the channel-mean |A| smoothed by a
  kh x kw averaging window, using the conv's own stride, padding and
  dilation. It is treated as a constant: no gradient flows through it.
* sign maps 0 to +1. Its gradient is the clipped straight-through estimate,
  1 where |x| <= 1 and 0 elsewhere.

Signs are taken before zero padding, so a padded position contributes 0 to
the correlation, exactly as it does in the packed kernel.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np

from . import functional as F
from .layers import Module, kaiming_normal
from .tensor import NonFiniteError, Tensor, apply_op, no_grad

ArrayOrTensor = Union[Tensor, np.ndarray]


def _array(x: ArrayOrTensor) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def signs(x: ArrayOrTensor) -> np.ndarray:
    """±1 array with sign(0) = +1."""
    data = _array(x)
    return np.where(data >= 0, 1, -1).astype(data.dtype)


def sign_ste(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("sign of a non-finite value")
    window = np.abs(x.data) <= 1.0

    def backward(g):
        return (g * window,)

    return apply_op("sign_ste", signs(x), (x,), backward)


def compute_beta(weight: ArrayOrTensor) -> np.ndarray:
    """Mean |W| per output filter, shape (out,)."""
    w = _array(weight)
    if w.ndim < 2 or w.size == 0:
        raise ValueError(f"cannot scale an empty filter bank of shape {w.shape}")
    return np.mean(np.abs(w).reshape(w.shape[0], -1), axis=1)


def compute_K(
    activations: ArrayOrTensor,
    kh: int,
    kw: int,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Per-position activation scale, shape (N, 1, OH, OW), off the tape."""
    a = _array(activations)
    if a.ndim != 4:
        raise ValueError(f"expected activations (N, C, H, W), got {a.shape}")
    mean_abs = np.mean(np.abs(a), axis=1, keepdims=True)
    kernel = np.full((1, 1, kh, kw), 1.0 / (kh * kw), dtype=a.dtype)
    with no_grad():
        k = F.conv2d(Tensor(mean_abs, dtype=a.dtype), Tensor(kernel, dtype=a.dtype), None, stride, padding, dilation)
    return k.detach()


@dataclass(frozen=True)
class ConvSpec:
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1


@dataclass
class BinConvParams:
    """Real-valued weights of a binary conv. Signs and β derive from them."""

    weight: Tensor

    @property
    def signs(self) -> np.ndarray:
        return signs(self.weight)

    @property
    def beta(self) -> np.ndarray:
        return compute_beta(self.weight)


def binconv_forward(activations: Tensor, params: BinConvParams, spec: ConvSpec = ConvSpec()) -> Tensor:
    weight = params.weight
    out_channels, _, kh, kw = weight.shape
    corr = F.conv2d(
        sign_ste(activations),
        sign_ste(weight),
        stride=spec.stride,
        padding=spec.padding,
        dilation=spec.dilation,
        groups=spec.groups,
    )
    beta = weight.abs().reshape(out_channels, -1).mean(axis=1).reshape(1, out_channels, 1, 1)
    k = compute_K(activations, kh, kw, spec.stride, spec.padding, spec.dilation)
    return corr * beta * k


class Sign(Module):
    def forward(self, x: Tensor) -> Tensor:
        return sign_ste(x)


class BinConv2d(Module):
    """Binary conv on real-valued input; the layer takes the signs itself.

    `kernel`, when set, replaces the float path. Deployment installs the
    bit-packed kernel there for inference.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        groups: int = 1,
    ) -> None:
        if in_channels % groups or out_channels % groups:
            raise ValueError(f"{in_channels}->{out_channels} channels do not split into {groups} groups")
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        self.weight = Tensor(kaiming_normal(shape, shape[1] * kernel_size**2, rng), requires_grad=True)
        self.spec = ConvSpec(stride, padding, dilation, groups)
        self.kernel: Optional[Callable[["BinConv2d", Tensor], Tensor]] = None

    @property
    def params(self) -> BinConvParams:
        return BinConvParams(self.weight)

    def forward(self, x: Tensor) -> Tensor:
        if self.kernel is not None:
            return self.kernel(self, x)
        return binconv_forward(x, self.params, self.spec)


def quantization_error(activations: ArrayOrTensor, weight: ArrayOrTensor, spec: ConvSpec = ConvSpec()) -> float:
    """Mean squared gap between the float conv and its binary approximation."""
    a = Tensor(_array(activations))
    w = Tensor(_array(weight))
    with no_grad():
        exact = F.conv2d(a, w, None, spec.stride, spec.padding, spec.dilation, spec.groups)
        approx = binconv_forward(a, BinConvParams(w), spec)
    return float(np.mean(np.square(exact.data - approx.data, dtype=np.float64)))


def sep_quantization_error(
    activations: ArrayOrTensor,
    depthwise: ArrayOrTensor,
    pointwise: ArrayOrTensor,
    spec: ConvSpec = ConvSpec(),
) -> float:
    """Same as `quantization_error` for a depthwise conv followed by a 1x1 conv.

    Each of the two stages is binarized on its own, so the approximation error
    of the first feeds the second.
    """
    a = Tensor(_array(activations))
    dw = Tensor(_array(depthwise))
    pw = Tensor(_array(pointwise))
    channels = a.shape[1]
    dw_spec = ConvSpec(spec.stride, spec.padding, spec.dilation, groups=channels)
    with no_grad():
        exact = F.conv2d(F.conv2d(a, dw, None, dw_spec.stride, dw_spec.padding, dw_spec.dilation, channels), pw)
        approx = binconv_forward(binconv_forward(a, BinConvParams(dw), dw_spec), BinConvParams(pw))
    return float(np.mean(np.square(exact.data - approx.data, dtype=np.float64)))


def quantization_error_trials(
    trials: int,
    rng: np.random.Generator,
    channels: int = 16,
    side: int = 8,
    kernel_size: int = 3,
) -> Tuple[np.ndarray, np.ndarray]:
    """Paired errors of a plain conv and a separable conv over random Gaussian draws.

    Both convs see the same activations and map `channels` to `channels`.
    """
    plain = np.empty(trials)
    separable = np.empty(trials)
    spec = ConvSpec(padding=kernel_size // 2)
    for t in range(trials):
        a = rng.standard_normal((1, channels, side, side))
        w = rng.standard_normal((channels, channels, kernel_size, kernel_size))
        dw = rng.standard_normal((channels, 1, kernel_size, kernel_size))
        pw = rng.standard_normal((channels, channels, 1, 1))
        plain[t] = quantization_error(a, w, spec)
        separable[t] = sep_quantization_error(a, dw, pw, spec)
    return plain, separable
