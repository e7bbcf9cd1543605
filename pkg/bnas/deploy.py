"""Bit-packed inference and cost accounting for trained binary networks.

Packing: the last axis of a sign tensor becomes uint64 words, bit i of the
vector at bit (i % 64) of word (i // 64), bit set for +1. Bits past the
vector length stay zero. For n valid bits

    a · b = n - 2 * popcount(a XOR b)

A conv packs each output position's (in_ch, kh, kw) patch into one bit
vector. Zero-padded patch cells carry no sign; a validity mask removes them
from both n and the popcount, so the integer result equals the float path's
correlation exactly.

Deployed model file, integers little-endian:

    b"BNASBIN1" | u32 version | u32 json_len | json {network, genotype, cost}
    u32 count | count x record
    record = u32 name_len | name | u8 kind | u32 rank | rank x u32 extent | payload
      kind 0: f32 values
      kind 1: binary conv weights: u32 n_words | u64 words | f32 beta[out]
"""
from __future__ import annotations

import contextlib
import json
import struct
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import functional as F
from .binarize import BinConv2d, BinConvParams, ConvSpec, binconv_forward, compute_beta, compute_K, signs
from .cells import MULTIPLIER, STEM_MULTIPLIER, Genotype, output_channels, plan_cells, stem_cost
from .functional import im2col
from .layers import Module
from .optim import _Reader
from .searchspace import (
    BIN_CONV_3X3,
    ZEROISE,
    OpCost,
    batch_norm_cost,
    conv_cost,
    float_conv_cost,
    flops,
    op_cost,
    out_side,
)
from .tensor import Tensor, no_grad
from .trainer import Network, NetworkConfig, build_network, read_model_header

WORD_BITS = 64
DEPLOY_MAGIC = b"BNASBIN1"
DEPLOY_VERSION = 1
KIND_FLOAT = 0
KIND_PACKED = 1


def _popcount_table() -> np.ndarray:
    values = np.arange(1 << 16, dtype=np.uint32)
    table = np.zeros(1 << 16, dtype=np.uint8)
    for bit in range(16):
        table += ((values >> bit) & 1).astype(np.uint8)
    return table


POPCOUNT_TABLE16 = _popcount_table()


@dataclass
class PackedTensor:
    words: np.ndarray  # uint64, (*lead, n_words)
    n: int  # valid bits per vector

    @property
    def n_words(self) -> int:
        return int(self.words.shape[-1])

    @property
    def shape(self) -> Tuple[int, ...]:
        """Logical shape of the sign tensor this packs."""
        return (*self.words.shape[:-1], self.n)

    @property
    def mask(self) -> np.ndarray:
        """Per-word mask of valid bits."""
        mask = np.full(self.n_words, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
        tail = self.n % WORD_BITS
        if tail:
            mask[-1] = np.uint64((1 << tail) - 1)
        return mask


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Boolean (..., n) to uint64 words (..., ceil(n / 64))."""
    bits = np.asarray(bits, dtype=bool)
    n = bits.shape[-1]
    pad = (-n) % WORD_BITS
    if pad:
        bits = np.concatenate([bits, np.zeros((*bits.shape[:-1], pad), dtype=bool)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def pack(x: Union[Tensor, np.ndarray]) -> PackedTensor:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return PackedTensor(pack_bits(data >= 0), int(data.shape[-1]))


def unpack(p: PackedTensor) -> Tensor:
    raw = np.ascontiguousarray(p.words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, count=p.n, bitorder="little")
    return Tensor(bits.astype(np.float32) * 2.0 - 1.0, dtype=np.float32)


def popcount(words: np.ndarray, native: bool = True) -> np.ndarray:
    """Set bits per uint64 word."""
    words = np.ascontiguousarray(words, dtype=np.uint64)
    if native and hasattr(np, "bitwise_count"):
        return np.bitwise_count(words).astype(np.int64)
    halves = POPCOUNT_TABLE16[words.view(np.uint16)]
    return halves.reshape(*words.shape, 4).sum(axis=-1, dtype=np.int64)


def xnor_dot(a: PackedTensor, b: PackedTensor, native: bool = True):
    """±1 inner product of two packed vectors (or of matching stacks of them)."""
    if a.n != b.n:
        raise ValueError(f"cannot dot packed vectors of length {a.n} and {b.n}")
    mismatches = popcount(a.words ^ b.words, native).sum(axis=-1)
    out = a.n - 2 * mismatches
    return int(out) if np.ndim(out) == 0 else out


# --- packed convolution ---------------------------------------------------------------


@dataclass
class PackedConv:
    """A binary conv's weights as bits plus β, ready for inference."""

    words: np.ndarray  # (groups, out // groups, n_words)
    beta: np.ndarray  # (out,)
    shape: Tuple[int, int, int, int]
    spec: ConvSpec

    @classmethod
    def from_weight(cls, weight: np.ndarray, spec: ConvSpec) -> "PackedConv":
        o, cg, kh, kw = weight.shape
        grouped = weight.reshape(spec.groups, o // spec.groups, cg * kh * kw)
        return cls(pack_bits(grouped >= 0), compute_beta(weight), tuple(weight.shape), spec)

    @classmethod
    def from_layer(cls, layer: BinConv2d) -> "PackedConv":
        return cls.from_weight(layer.weight.data, layer.spec)

    def to_weight(self) -> np.ndarray:
        """Latent weights with the same signs and β: sign * β per filter."""
        o, cg, kh, kw = self.shape
        n = cg * kh * kw
        raw = np.ascontiguousarray(self.words.astype("<u8")).view(np.uint8)
        bits = np.unpackbits(raw, axis=-1, count=n, bitorder="little").reshape(self.shape)
        return (bits.astype(np.float32) * 2.0 - 1.0) * self.beta.astype(np.float32).reshape(o, 1, 1, 1)


def packed_binconv(activations, conv: Union[PackedConv, BinConvParams], spec: Optional[ConvSpec] = None, native: bool = True) -> Tensor:
    """Binary conv via XNOR and popcount; same result as `binconv_forward`."""
    if isinstance(conv, BinConvParams):
        conv = PackedConv.from_weight(conv.weight.data, spec or ConvSpec())
    spec = conv.spec
    x = activations.data if isinstance(activations, Tensor) else np.asarray(activations)
    o, cg, kh, kw = conv.shape
    n, c, _, _ = x.shape
    if c != cg * spec.groups:
        raise ValueError(f"input has {c} channels, packed conv expects {cg * spec.groups}")
    g = spec.groups
    k = cg * kh * kw

    cols, oh, ow = im2col(signs(x), kh, kw, spec.stride, spec.padding, spec.dilation)
    cols = cols.reshape(n, g, k, oh * ow).transpose(0, 1, 3, 2)  # (n, g, positions, k)
    a_bits = pack_bits(cols > 0)
    valid = pack_bits(cols != 0)
    counts = popcount(valid, native).sum(axis=-1)  # (n, g, positions)

    dots = np.empty((n, g, o // g, oh * ow), dtype=np.int64)
    for i in range(n):
        xor = a_bits[i][:, None, :, :] ^ conv.words[:, :, None, :]
        xor &= valid[i][:, None, :, :]
        dots[i] = counts[i][:, None, :] - 2 * popcount(xor, native).sum(axis=-1)

    dtype = x.dtype
    beta = conv.beta.astype(dtype).reshape(1, o, 1, 1)
    scale = compute_K(x, kh, kw, spec.stride, spec.padding, spec.dilation).data
    return Tensor(dots.reshape(n, o, oh, ow).astype(dtype) * beta * scale, dtype=dtype)


@contextlib.contextmanager
def packed_inference(net: Module, native: bool = True) -> Iterator[Module]:
    """Run every binary conv of `net` through the packed kernel inside the block."""
    layers = [m for m in net.modules() if isinstance(m, BinConv2d)]
    cache: Dict[int, PackedConv] = {id(m): PackedConv.from_layer(m) for m in layers}

    def kernel(layer: BinConv2d, x: Tensor) -> Tensor:
        return packed_binconv(x, cache[id(layer)], native=native)

    was_training = net.training
    net.eval()
    for layer in layers:
        layer.kernel = kernel
    try:
        yield net
    finally:
        for layer in layers:
            layer.kernel = None
        net.train(was_training)


# --- cost report -------------------------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    binary_ops: int
    float_ops: int
    flops: float
    param_bits_binary: int
    param_bits_float: int
    memory_savings: float
    speedup: float
    reference_float_ops: int
    reference_param_bits: int

    @property
    def param_bits(self) -> int:
        return self.param_bits_binary + self.param_bits_float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"


def _preprocess_cost(c_in: int, c_out: int, side: int, reduce_input: bool, precision: str) -> OpCost:
    if reduce_input:
        # relu, two offset stride-2 1x1 float convs, batch norm
        half = c_out // 2
        return (
            float_conv_cost(c_in, half, 1, side, 2)
            + float_conv_cost(c_in, c_out - half, 1, side, 2)
            + batch_norm_cost(c_out, out_side(side, 2))
        )
    return conv_cost(c_in, c_out, 1, side, 1, precision=precision)


def _skip_cost(c_prev: int, width: int, side: int, reduction: bool) -> OpCost:
    o = out_side(side, 2) if reduction else side
    cost = OpCost(float_ops=width * o * o)  # the add
    if reduction:
        cost = cost + OpCost(float_ops=c_prev * o * o * 10)  # 3x3 average, padding excluded
    if reduction or c_prev != width:
        cost = cost + float_conv_cost(c_prev, width, 1, o)
    return cost


def network_cost(genotype: Genotype, config: NetworkConfig) -> OpCost:
    """Whole-network cost: stem, cells (preprocessing, retained edges, node sums, skips), classifier."""
    side = config.image_side
    total = stem_cost(STEM_MULTIPLIER * config.init_channels, side, config.stem_group_conv)
    plan = plan_cells(config.num_cells, config.init_channels, side)
    for cell in plan:
        c = cell.channels
        o = out_side(cell.side, 2) if cell.reduction else cell.side
        pp_side = 2 * cell.side if cell.reduction_prev else cell.side
        total = total + _preprocess_cost(cell.c_prevprev, c, pp_side, cell.reduction_prev, config.precision)
        total = total + _preprocess_cost(cell.c_prev, c, cell.side, False, config.precision)
        for node in genotype.cell(cell.reduction):
            for src, op in node:
                stride = 2 if cell.reduction and src < 2 else 1
                total = total + op_cost(op, c, c, cell.side if src < 2 else o, stride, config.precision)
            total = total + OpCost(float_ops=c * o * o)  # node sum
        if config.use_skip:
            total = total + _skip_cost(cell.c_prev, MULTIPLIER * c, cell.side, cell.reduction)
        side = o
    channels = output_channels(plan)
    head = OpCost(
        float_ops=channels * side * side + channels * config.num_classes,
        param_bits=32 * (channels * config.num_classes + config.num_classes),
    )
    return total + head


def reference_genotype(genotype: Genotype) -> Genotype:
    """The float reference: Zeroise edges become 3x3 convs."""
    return genotype.replace_op(ZEROISE.name, BIN_CONV_3X3.name)


def cost_report(genotype: Genotype, config: NetworkConfig, reference: Optional[Genotype] = None) -> CostReport:
    cost = network_cost(genotype, config)
    ref = network_cost(reference or reference_genotype(genotype), replace(config, precision="float"))
    total_flops = flops(cost)
    return CostReport(
        binary_ops=cost.binary_ops,
        float_ops=cost.float_ops,
        flops=total_flops,
        param_bits_binary=cost.binary_param_bits,
        param_bits_float=cost.float_param_bits,
        memory_savings=ref.param_bits / cost.param_bits,
        speedup=ref.float_ops / total_flops,
        reference_float_ops=ref.float_ops,
        reference_param_bits=ref.param_bits,
    )


# --- timing ----------------------------------------------------------------------------------------


@dataclass
class LayerTiming:
    name: str
    input_shape: Tuple[int, ...]
    float_ms: float
    packed_ms: float

    @property
    def ratio(self) -> float:
        return self.float_ms / self.packed_ms if self.packed_ms else float("nan")


def _best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best * 1e3


def time_layers(net: Module, images: np.ndarray, repeats: int = 3) -> List[LayerTiming]:
    """Per binary conv: float conv of the same shape against the packed kernel."""
    names = {id(m): name for name, m in net.named_modules() if isinstance(m, BinConv2d)}
    inputs: Dict[int, np.ndarray] = {}

    def capture(layer: BinConv2d, x: Tensor) -> Tensor:
        inputs.setdefault(id(layer), x.data.copy())
        return binconv_forward(x, layer.params, layer.spec)

    layers = [m for m in net.modules() if isinstance(m, BinConv2d)]
    net.eval()
    for layer in layers:
        layer.kernel = capture
    try:
        with no_grad():
            net(Tensor(images))
    finally:
        for layer in layers:
            layer.kernel = None

    timings = []
    for layer in layers:
        x = inputs.get(id(layer))
        if x is None:
            continue
        packed = PackedConv.from_layer(layer)
        weight = Tensor(layer.weight.data)
        s = layer.spec
        float_ms = _best_of(lambda: F.conv2d(Tensor(x), weight, None, s.stride, s.padding, s.dilation, s.groups), repeats)
        packed_ms = _best_of(lambda: packed_binconv(x, packed), repeats)
        timings.append(LayerTiming(names[id(layer)], tuple(x.shape), float_ms, packed_ms))
    return timings


# --- deployed file -------------------------------------------------------------------------------


def export_model(path: Union[str, Path], net: Network, config: NetworkConfig, genotype: Genotype, seed: int = 0) -> CostReport:
    """Write the deployed model; returns the cost report stored in its header."""
    report = cost_report(genotype, config)
    header = json.dumps(
        {"network": config.to_dict(), "genotype": genotype.to_dict(), "seed": seed, "cost": report.to_dict()},
        sort_keys=True,
        allow_nan=False,
    ).encode("utf-8")
    binary_weights = {id(m.weight): m for m in net.modules() if isinstance(m, BinConv2d)}
    state = net.state_dict()
    params = dict(net.named_parameters())

    records = []
    for name, array in state.items():
        encoded = name.encode("utf-8")
        prefix = struct.pack("<I", len(encoded)) + encoded
        layer = binary_weights.get(id(params.get(name)))
        if layer is not None:
            packed = PackedConv.from_layer(layer)
            words = packed.words.astype("<u8")
            records.append(
                prefix
                + struct.pack("<BI4I", KIND_PACKED, 4, *packed.shape)
                + struct.pack("<I", words.size)
                + words.tobytes()
                + packed.beta.astype("<f4").tobytes()
            )
        else:
            data = np.ascontiguousarray(array, dtype="<f4")
            records.append(
                prefix + struct.pack(f"<BI{data.ndim}I", KIND_FLOAT, data.ndim, *data.shape) + data.tobytes()
            )
    blob = [DEPLOY_MAGIC, struct.pack("<II", DEPLOY_VERSION, len(header)), header, struct.pack("<I", len(records)), *records]
    Path(path).write_bytes(b"".join(blob))
    return report


@dataclass
class DeployedModel:
    network: Network
    config: NetworkConfig
    genotype: Genotype
    cost: CostReport


def load_deployed(path: Union[str, Path]) -> DeployedModel:
    reader = _Reader(Path(path).read_bytes(), "deployed model")
    if reader.take(len(DEPLOY_MAGIC)) != DEPLOY_MAGIC:
        raise ValueError(f"{path} is not a deployed bnas model")
    version = reader.u32()
    if version != DEPLOY_VERSION:
        raise ValueError(f"unsupported deployed model version {version}")
    header = json.loads(reader.take(reader.u32()).decode("utf-8"))
    config, genotype, seed = read_model_header(header, path)
    try:
        cost = CostReport(**header["cost"])
    except (KeyError, TypeError) as e:
        raise ValueError(f"{path}: malformed cost record: {e}") from None
    net = build_network(genotype, config, seed)

    specs = {f"{name}.weight": m.spec for name, m in net.named_modules() if isinstance(m, BinConv2d)}
    state: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.text()
        kind = reader.take(1)[0]
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        if kind == KIND_FLOAT:
            state[name] = reader.array("<f4", shape).astype(np.float32)
        elif kind == KIND_PACKED:
            n_words = reader.u32()
            words = reader.array("<u8", (n_words,)).astype(np.uint64)
            beta = reader.array("<f4", (shape[0],)).astype(np.float32)
            spec = specs.get(name)
            if spec is None:
                raise ValueError(f"packed record {name!r} does not match a binary conv")
            words = words.reshape(spec.groups, shape[0] // spec.groups, -1)
            state[name] = PackedConv(words, beta, shape, spec).to_weight()
        else:
            raise ValueError(f"unknown record kind {kind} for {name!r}")
    net.load_state_dict(state)
    net.eval()
    return DeployedModel(net, config, genotype, cost)
