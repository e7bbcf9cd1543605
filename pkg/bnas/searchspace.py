"""The candidate layer types, the blocks that realize them on an edge, and
their cost accounting.

Search space, in index order (argmax ties go to the lowest index):

    bin_conv_3x3  bin_conv_5x5  bin_dil_conv_3x3  bin_dil_conv_5x5
    max_pool_3x3  avg_pool_3x3  zeroise

Separable convolutions are registered too but are not part of the space;
only ablations and the layer study reach them.

Cost convention:

* binary_ops: multiply-accumulates done with XNOR/popcount.
* float_ops: everything else (batch norm, the βK scaling, pooling, float convs
  at one op per MAC).
* FLOPs = float_ops + binary_ops / 64.
* param_bits: 1 bit per binary weight, 32 bits per float value (β included).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import functional as F
from .binarize import BinConv2d
from .layers import BatchNorm2d, Conv2d, Module
from .tensor import Tensor

SPACE_VERSION = "bnas-space-1"
PRECISIONS = ("binary", "float")
BITS_PER_WORD = 64

CONV_FAMILIES = ("conv", "dil_conv", "sep_conv")


@dataclass(frozen=True)
class LayerType:
    name: str
    family: str
    kernel_size: int = 3
    dilation: int = 1

    @property
    def has_params(self) -> bool:
        return self.family in CONV_FAMILIES

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2

    def __str__(self) -> str:
        return self.name


BIN_CONV_3X3 = LayerType("bin_conv_3x3", "conv", 3)
BIN_CONV_5X5 = LayerType("bin_conv_5x5", "conv", 5)
BIN_DIL_CONV_3X3 = LayerType("bin_dil_conv_3x3", "dil_conv", 3, dilation=2)
BIN_DIL_CONV_5X5 = LayerType("bin_dil_conv_5x5", "dil_conv", 5, dilation=2)
MAX_POOL_3X3 = LayerType("max_pool_3x3", "max_pool", 3)
AVG_POOL_3X3 = LayerType("avg_pool_3x3", "avg_pool", 3)
ZEROISE = LayerType("zeroise", "zeroise", 1)

BIN_SEP_CONV_3X3 = LayerType("bin_sep_conv_3x3", "sep_conv", 3)
BIN_SEP_CONV_5X5 = LayerType("bin_sep_conv_5x5", "sep_conv", 5)

SEARCH_SPACE: Tuple[LayerType, ...] = (
    BIN_CONV_3X3,
    BIN_CONV_5X5,
    BIN_DIL_CONV_3X3,
    BIN_DIL_CONV_5X5,
    MAX_POOL_3X3,
    AVG_POOL_3X3,
    ZEROISE,
)

LAYER_TYPES: Dict[str, LayerType] = {
    t.name: t for t in (*SEARCH_SPACE, BIN_SEP_CONV_3X3, BIN_SEP_CONV_5X5)
}


def layer_type(name) -> LayerType:
    if isinstance(name, LayerType):
        return name
    try:
        return LAYER_TYPES[name]
    except KeyError:
        raise ValueError(f"unknown layer type {name!r}; known: {', '.join(LAYER_TYPES)}") from None


def search_space(dilated: bool = True, separable: bool = False, zeroise: bool = True) -> Tuple[LayerType, ...]:
    """The default space with families toggled, order preserved."""
    ops = [t for t in SEARCH_SPACE if (dilated or t.family != "dil_conv") and (zeroise or t is not ZEROISE)]
    if separable:
        # before the pools, so conv kinds stay contiguous
        ops.insert(sum(t.has_params for t in ops), BIN_SEP_CONV_3X3)
    return tuple(ops)


def _check_precision(precision: str) -> None:
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {PRECISIONS}, got {precision!r}")


# --- blocks -------------------------------------------------------------------


class ConvBlock(Module):
    """batch norm -> binary conv (which signs its input), or BN -> ReLU -> conv in float."""

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
        precision: str = "binary",
        affine: bool = False,
    ) -> None:
        _check_precision(precision)
        self.precision = precision
        self.bn = BatchNorm2d(in_channels, affine=affine)
        conv_cls = BinConv2d if precision == "binary" else Conv2d
        self.conv = conv_cls(
            in_channels,
            out_channels,
            kernel_size,
            rng,
            stride=stride,
            padding=padding,
            dilation=dilation,
            groups=groups,
        )

    def forward(self, x: Tensor) -> Tensor:
        x = self.bn(x)
        if self.precision == "float":
            x = x.relu()
        return self.conv(x)


class SepConvBlock(Module):
    """Depthwise conv block followed by a pointwise one, each binarized on its own."""

    def __init__(self, layer: LayerType, in_channels: int, out_channels: int, stride: int, rng, precision: str = "binary") -> None:
        self.depthwise = ConvBlock(
            in_channels,
            in_channels,
            layer.kernel_size,
            rng,
            stride=stride,
            padding=layer.padding,
            dilation=layer.dilation,
            groups=in_channels,
            precision=precision,
        )
        self.pointwise = ConvBlock(in_channels, out_channels, 1, rng, precision=precision)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class PoolBlock(Module):
    def __init__(self, layer: LayerType, channels: int, stride: int) -> None:
        self.layer = layer
        self.stride = stride
        self.bn = BatchNorm2d(channels, affine=False)

    def forward(self, x: Tensor) -> Tensor:
        pool = F.max_pool2d if self.layer.family == "max_pool" else F.avg_pool2d
        return self.bn(pool(x, self.layer.kernel_size, self.stride, self.layer.kernel_size // 2))


class Zeroise(Module):
    """Emits zeros of the edge's output shape, whatever the input."""

    def __init__(self, channels: int, stride: int) -> None:
        self.channels = channels
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        side_h = -(-h // self.stride)
        side_w = -(-w // self.stride)
        return Tensor(np.zeros((n, self.channels, side_h, side_w), dtype=x.data.dtype))


def make_block(
    layer,
    channels: int,
    stride: int,
    rng: Optional[np.random.Generator] = None,
    precision: str = "binary",
) -> Module:
    """The block for `layer` on a `channels` -> `channels` edge."""
    layer = layer_type(layer)
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if layer.family in ("conv", "dil_conv"):
        return ConvBlock(
            channels,
            channels,
            layer.kernel_size,
            rng,
            stride=stride,
            padding=layer.padding,
            dilation=layer.dilation,
            precision=precision,
        )
    if layer.family == "sep_conv":
        return SepConvBlock(layer, channels, channels, stride, rng, precision)
    if layer.family in ("max_pool", "avg_pool"):
        return PoolBlock(layer, channels, stride)
    return Zeroise(channels, stride)


def apply(layer, x: Tensor, stride: int, rng: Optional[np.random.Generator] = None, precision: str = "binary") -> Tensor:
    """One-off application of a freshly built block to `x`."""
    return make_block(layer, x.shape[1], stride, rng, precision)(x)


# --- cost accounting ------------------------------------------------------------


@dataclass(frozen=True)
class OpCost:
    binary_ops: int = 0
    float_ops: int = 0
    param_bits: int = 0
    binary_param_bits: int = 0

    def __add__(self, other: "OpCost") -> "OpCost":
        return OpCost(
            self.binary_ops + other.binary_ops,
            self.float_ops + other.float_ops,
            self.param_bits + other.param_bits,
            self.binary_param_bits + other.binary_param_bits,
        )

    @property
    def flops(self) -> float:
        return flops(self)

    @property
    def float_param_bits(self) -> int:
        return self.param_bits - self.binary_param_bits


def flops(cost: OpCost) -> float:
    return cost.float_ops + cost.binary_ops / BITS_PER_WORD


def out_side(spatial: int, stride: int) -> int:
    return -(-spatial // stride)


def batch_norm_cost(channels: int, side: int) -> OpCost:
    return OpCost(float_ops=2 * channels * side * side)


def float_conv_cost(in_ch: int, out_ch: int, kernel_size: int, spatial: int, stride: int = 1, groups: int = 1) -> OpCost:
    """A bare float conv, one op per MAC."""
    o = out_side(spatial, stride)
    weights = out_ch * (in_ch // groups) * kernel_size * kernel_size
    return OpCost(float_ops=weights * o * o, param_bits=32 * weights)


def conv_cost(
    in_ch: int,
    out_ch: int,
    kernel_size: int,
    spatial: int,
    stride: int = 1,
    groups: int = 1,
    precision: str = "binary",
) -> OpCost:
    """A conv block at input side `spatial`; binary blocks include their batch norm and βK scaling."""
    _check_precision(precision)
    o = out_side(spatial, stride)
    weights = out_ch * (in_ch // groups) * kernel_size * kernel_size
    macs = weights * o * o
    if precision == "float":
        return float_conv_cost(in_ch, out_ch, kernel_size, spatial, stride, groups) + batch_norm_cost(in_ch, spatial)
    scaling = kernel_size * kernel_size * o * o + 2 * out_ch * o * o
    return OpCost(
        binary_ops=macs,
        float_ops=batch_norm_cost(in_ch, spatial).float_ops + scaling,
        param_bits=weights + 32 * out_ch,
        binary_param_bits=weights,
    )


def pool_cost(layer: LayerType, channels: int, spatial: int, stride: int) -> OpCost:
    o = out_side(spatial, stride)
    per_output = layer.kernel_size**2 + (1 if layer.family == "avg_pool" else 0)
    return OpCost(float_ops=channels * o * o * per_output) + batch_norm_cost(channels, o)


def op_cost(layer, in_ch: int, out_ch: int, spatial: int, stride: int, precision: str = "binary") -> OpCost:
    """Cost of one edge. `spatial` is the input side length."""
    layer = layer_type(layer)
    if layer.family in ("conv", "dil_conv"):
        return conv_cost(in_ch, out_ch, layer.kernel_size, spatial, stride, precision=precision)
    if layer.family == "sep_conv":
        depthwise = conv_cost(in_ch, in_ch, layer.kernel_size, spatial, stride, groups=in_ch, precision=precision)
        pointwise = conv_cost(in_ch, out_ch, 1, out_side(spatial, stride), 1, precision=precision)
        return depthwise + pointwise
    if layer.family in ("max_pool", "avg_pool"):
        return pool_cost(layer, in_ch, spatial, stride)
    return OpCost()
