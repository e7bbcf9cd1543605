"""Cell template: two inputs, four intermediate nodes, fourteen edges.

Node 0 is the output of the cell two back, node 1 the previous cell's output,
nodes 2..5 are intermediate. Edges run from every earlier node to every
intermediate node and are numbered destination-major:

    (0,2) (1,2) | (0,3) (1,3) (2,3) | (0,4) ... | ... (4,5)

Reduction cells put stride 2 on edges leaving nodes 0 and 1. The cell output
is the channel concat of the intermediate nodes plus an inter-cell skip from
the previous cell's output (identity, or float 1x1 projection, preceded by a
3x3 stride-2 average pool in reduction cells).
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import functional as F
from .layers import BatchNorm2d, Conv2d, Linear, Module
from .searchspace import (
    SEARCH_SPACE,
    SPACE_VERSION,
    ConvBlock,
    LayerType,
    OpCost,
    batch_norm_cost,
    float_conv_cost,
    layer_type,
    make_block,
)
from .tensor import Tensor, concat, softmax

NUM_NODES = 4
MULTIPLIER = 4  # cell output width = 4 x node width
STEM_MULTIPLIER = 3
STEM_GROUPS = 4


@dataclass(frozen=True)
class CellSpec:
    reduction: bool = False
    num_intermediate: int = NUM_NODES

    @property
    def kind(self) -> str:
        return "reduction" if self.reduction else "normal"

    @property
    def edges(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(
            (src, dst) for dst in range(2, 2 + self.num_intermediate) for src in range(dst)
        )

    def stride(self, src: int) -> int:
        return 2 if self.reduction and src < 2 else 1


NUM_EDGES = len(CellSpec().edges)


@dataclass
class ArchParams:
    """Mixed-op logits, one row per edge, shared by every cell of a kind."""

    normal: Tensor
    reduce: Tensor
    ops: Tuple[LayerType, ...] = SEARCH_SPACE

    def __post_init__(self) -> None:
        expected = (NUM_EDGES, len(self.ops))
        for name in ("normal", "reduce"):
            if getattr(self, name).shape != expected:
                raise ValueError(f"{name} logits must have shape {expected}, got {getattr(self, name).shape}")

    @classmethod
    def initialize(cls, rng: np.random.Generator, ops: Sequence[LayerType] = SEARCH_SPACE, scale: float = 1e-3) -> "ArchParams":
        shape = (NUM_EDGES, len(ops))
        return cls(
            Tensor(scale * rng.standard_normal(shape), requires_grad=True),
            Tensor(scale * rng.standard_normal(shape), requires_grad=True),
            tuple(ops),
        )

    def logits(self, reduction: bool) -> Tensor:
        return self.reduce if reduction else self.normal

    def weights(self, reduction: bool) -> Tensor:
        return softmax(self.logits(reduction), axis=-1)

    def probabilities(self, reduction: bool) -> np.ndarray:
        logits = self.logits(reduction).data.astype(np.float64)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def parameters(self) -> List[Tensor]:
        return [self.normal, self.reduce]


# --- genotype -------------------------------------------------------------------

Edge = Tuple[int, str]
CellGenotype = Tuple[Tuple[Edge, ...], ...]


def _freeze(cell) -> CellGenotype:
    return tuple(tuple((int(src), layer_type(op).name) for src, op in node) for node in cell)


@dataclass(frozen=True)
class Genotype:
    """Two retained (source, op) edges per intermediate node, for both cell kinds."""

    normal: CellGenotype
    reduce: CellGenotype
    gamma: float = 1.0
    seed: Optional[int] = None
    version: str = SPACE_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(self, "normal", _freeze(self.normal))
        object.__setattr__(self, "reduce", _freeze(self.reduce))
        for kind in ("normal", "reduce"):
            cell = getattr(self, kind)
            if len(cell) != NUM_NODES:
                raise ValueError(f"{kind} cell needs {NUM_NODES} nodes, got {len(cell)}")
            for node, edges in enumerate(cell):
                sources = [src for src, _ in edges]
                if len(edges) != 2 or len(set(sources)) != 2:
                    raise ValueError(f"{kind} node {node + 2} needs 2 distinct sources, got {sources}")
                if any(not 0 <= src < node + 2 for src in sources):
                    raise ValueError(f"{kind} node {node + 2} references out-of-range source in {sources}")

    def cell(self, reduction: bool) -> CellGenotype:
        return self.reduce if reduction else self.normal

    def ops(self) -> Counter:
        return Counter(op for cell in (self.normal, self.reduce) for node in cell for _, op in node)

    def replace_op(self, old: str, new: str) -> "Genotype":
        def swap(cell):
            return tuple(tuple((src, new if op == old else op) for src, op in node) for node in cell)

        return Genotype(swap(self.normal), swap(self.reduce), self.gamma, self.seed, self.version)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "normal": [[[src, op] for src, op in node] for node in self.normal],
            "reduce": [[[src, op] for src, op in node] for node in self.reduce],
            "gamma": None if math.isinf(self.gamma) else self.gamma,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, payload: dict) -> "Genotype":
        try:
            gamma = payload["gamma"]
            return cls(
                payload["normal"],
                payload["reduce"],
                math.inf if gamma is None else float(gamma),
                payload.get("seed"),
                payload.get("version", SPACE_VERSION),
            )
        except (KeyError, TypeError) as e:
            raise ValueError(f"malformed genotype: {e}") from None

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        return cls.from_dict(json.loads(text))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Genotype":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def uniform_genotype(op: str, gamma: float = 1.0) -> Genotype:
    """Every node takes `op` from its two nearest predecessors."""
    cell = tuple(((node, op), (node + 1, op)) for node in range(NUM_NODES))
    return Genotype(cell, cell, gamma)


# --- blocks -----------------------------------------------------------------------


class FactorizedReduce(Module):
    """Halve the side with two offset stride-2 1x1 float convs, concatenated."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator) -> None:
        half = out_channels // 2
        self.conv_1 = Conv2d(in_channels, half, 1, rng, stride=2)
        self.conv_2 = Conv2d(in_channels, out_channels - half, 1, rng, stride=2)
        self.bn = BatchNorm2d(out_channels, affine=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"factorized reduce needs an even side, got {x.shape[2:]}")
        x = x.relu()
        return self.bn(concat([self.conv_1(x), self.conv_2(x[:, :, 1:, 1:])], axis=1))


class InterCellSkip(Module):
    def __init__(self, in_channels: int, out_channels: int, reduction: bool, rng: np.random.Generator) -> None:
        self.reduction = reduction
        needs_projection = reduction or in_channels != out_channels
        self.proj = Conv2d(in_channels, out_channels, 1, rng) if needs_projection else None

    def forward(self, x: Tensor) -> Tensor:
        if self.reduction:
            x = F.avg_pool2d(x, 3, 2, 1)
        if self.proj is not None:
            x = self.proj(x)
        return x


def intercell_skip(x: Tensor, reduction: bool, out_channels: Optional[int] = None, rng=None) -> Tensor:
    """Skip path applied once with a fresh projection (identity when nothing changes)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return InterCellSkip(x.shape[1], out_channels or x.shape[1], reduction, rng)(x)


class MixedOp(Module):
    def __init__(self, channels: int, stride: int, ops: Sequence[LayerType], rng: np.random.Generator) -> None:
        self.ops = tuple(ops)
        self.blocks = [make_block(op, channels, stride, rng) for op in self.ops]

    def forward(self, x: Tensor, weights: Tensor) -> Tensor:
        total = None
        for i, (op, block) in enumerate(zip(self.ops, self.blocks)):
            if op.family == "zeroise":
                continue
            term = weights[i] * block(x)
            total = term if total is None else total + term
        if total is None:
            return self.blocks[0](x)
        return total


class _Cell(Module):
    def __init__(
        self,
        c_prevprev: int,
        c_prev: int,
        channels: int,
        reduction: bool,
        reduction_prev: bool,
        rng: np.random.Generator,
        use_skip: bool = True,
        precision: str = "binary",
    ) -> None:
        self.spec = CellSpec(reduction)
        self.reduction = reduction
        self.channels = channels
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(c_prevprev, channels, rng)
        else:
            self.preprocess0 = ConvBlock(c_prevprev, channels, 1, rng, precision=precision)
        self.preprocess1 = ConvBlock(c_prev, channels, 1, rng, precision=precision)
        self.skip = InterCellSkip(c_prev, MULTIPLIER * channels, reduction, rng) if use_skip else None

    def _inputs(self, x_prev: Tensor, x_prevprev: Tensor) -> List[Tensor]:
        return [self.preprocess0(x_prevprev), self.preprocess1(x_prev)]

    def _output(self, states: List[Tensor], x_prev: Tensor) -> Tensor:
        out = concat(states[2:], axis=1)
        if self.skip is not None:
            out = out + self.skip(x_prev)
        return out


class SuperCell(_Cell):
    """Every edge is a softmax-weighted mix of all candidate ops."""

    def __init__(self, c_prevprev, c_prev, channels, reduction, reduction_prev, rng, ops=SEARCH_SPACE, use_skip=True) -> None:
        super().__init__(c_prevprev, c_prev, channels, reduction, reduction_prev, rng, use_skip)
        self.ops = tuple(ops)
        self.edges = [MixedOp(channels, self.spec.stride(src), self.ops, rng) for src, _ in self.spec.edges]

    def forward(self, x_prev: Tensor, x_prevprev: Tensor, weights: Tensor) -> Tensor:
        if weights.shape != (len(self.edges), len(self.ops)):
            raise ValueError(f"expected edge weights of shape {(len(self.edges), len(self.ops))}, got {weights.shape}")
        states = self._inputs(x_prev, x_prevprev)
        offset = 0
        for node in range(self.spec.num_intermediate):
            total = None
            for src in range(node + 2):
                out = self.edges[offset + src](states[src], weights[offset + src])
                total = out if total is None else total + out
            offset += node + 2
            states.append(total)
        return self._output(states, x_prev)


def supercell_forward(cell: SuperCell, x_prev: Tensor, x_prevprev: Tensor, arch: ArchParams) -> Tensor:
    return cell(x_prev, x_prevprev, arch.weights(cell.reduction))


class DiscreteCell(_Cell):
    """Only the two retained edges per node, each with its chosen op."""

    def __init__(
        self,
        genotype: Genotype,
        c_prevprev: int,
        c_prev: int,
        channels: int,
        reduction: bool,
        reduction_prev: bool,
        rng: np.random.Generator,
        use_skip: bool = True,
        precision: str = "binary",
    ) -> None:
        super().__init__(c_prevprev, c_prev, channels, reduction, reduction_prev, rng, use_skip, precision)
        self.genotype = genotype.cell(reduction)
        self._check_sources()
        self.blocks = [
            make_block(op, channels, self.spec.stride(src), rng, precision)
            for node in self.genotype
            for src, op in node
        ]

    def _check_sources(self) -> None:
        for node, edges in enumerate(self.genotype):
            for src, _ in edges:
                if not 0 <= src < node + 2:
                    raise ValueError(f"node {node + 2} cannot read from node {src}")

    @classmethod
    def from_supercell(cls, cell: SuperCell, genotype: Genotype) -> "DiscreteCell":
        """A discrete view sharing the supercell's blocks and weights."""
        view = cls.__new__(cls)
        view.spec = cell.spec
        view.reduction = cell.reduction
        view.channels = cell.channels
        view.preprocess0 = cell.preprocess0
        view.preprocess1 = cell.preprocess1
        view.skip = cell.skip
        view.genotype = genotype.cell(cell.reduction)
        view._check_sources()
        edge_index = {edge: i for i, edge in enumerate(cell.spec.edges)}
        view.blocks = []
        for node, edges in enumerate(view.genotype):
            for src, op in edges:
                mixed = cell.edges[edge_index[(src, node + 2)]]
                view.blocks.append(mixed.blocks[[o.name for o in mixed.ops].index(op)])
        return view

    def forward(self, x_prev: Tensor, x_prevprev: Tensor) -> Tensor:
        states = self._inputs(x_prev, x_prevprev)
        for node, edges in enumerate(self.genotype):
            (src_a, _), (src_b, _) = edges
            block_a, block_b = self.blocks[2 * node], self.blocks[2 * node + 1]
            states.append(block_a(states[src_a]) + block_b(states[src_b]))
        return self._output(states, x_prev)


def discrete_cell_forward(cell: DiscreteCell, x_prev: Tensor, x_prevprev: Tensor) -> Tensor:
    return cell(x_prev, x_prevprev)


# --- network skeleton ---------------------------------------------------------------


@dataclass(frozen=True)
class CellPlan:
    index: int
    c_prevprev: int
    c_prev: int
    channels: int
    reduction: bool
    reduction_prev: bool
    side: int  # side length of the previous cell's output


def reduction_indices(num_cells: int) -> Tuple[int, ...]:
    return tuple(sorted({num_cells // 3, 2 * num_cells // 3}))


def plan_cells(num_cells: int, init_channels: int, image_side: int = 32, stem_multiplier: int = STEM_MULTIPLIER) -> List[CellPlan]:
    """Channel and spatial bookkeeping for a stack of cells, reductions at N/3 and 2N/3."""
    reductions = reduction_indices(num_cells)
    c_curr = stem_multiplier * init_channels
    c_pp, c_p, c = c_curr, c_curr, init_channels
    side = image_side
    reduction_prev = False
    plan = []
    for i in range(num_cells):
        reduction = i in reductions
        if reduction:
            c *= 2
        plan.append(CellPlan(i, c_pp, c_p, c, reduction, reduction_prev, side))
        if reduction:
            side = -(-side // 2)
        c_pp, c_p = c_p, MULTIPLIER * c
        reduction_prev = reduction
    return plan


def output_channels(plan: Sequence[CellPlan]) -> int:
    return MULTIPLIER * plan[-1].channels


def stem_cost(out_channels: int, side: int, grouped: bool = False) -> OpCost:
    """Float ops and parameter bits of the stem at a given input side."""
    hidden = stem_hidden_width(out_channels, grouped)
    return _stem_cost(out_channels, hidden, STEM_GROUPS if grouped else 1, side)


def _stem_cost(out_channels: int, hidden: int, groups: int, side: int) -> OpCost:
    return (
        float_conv_cost(3, hidden, 3, side)
        + batch_norm_cost(hidden, side)
        + float_conv_cost(hidden, out_channels, 3, side, groups=groups)
        + batch_norm_cost(out_channels, side)
    )


def stem_hidden_width(out_channels: int, grouped: bool = False) -> int:
    """Width between the two stem convs.

    Ungrouped stems keep ``out_channels``. A grouped stem starts from
    ``STEM_GROUPS * out_channels`` and narrows in steps of ``STEM_GROUPS`` until
    its float ops fit under the ungrouped stem's.
    """
    if not grouped:
        return out_channels
    if out_channels % STEM_GROUPS:
        raise ValueError(f"stem width {out_channels} does not split into {STEM_GROUPS} groups")
    budget = _stem_cost(out_channels, out_channels, 1, 1).float_ops
    hidden = STEM_GROUPS * out_channels
    while hidden > STEM_GROUPS and _stem_cost(out_channels, hidden, STEM_GROUPS, 1).float_ops > budget:
        hidden -= STEM_GROUPS
    return hidden


class Stem(Module):
    """Two float 3x3 convs with affine batch norm.

    The grouped variant splits the second conv into ``STEM_GROUPS`` groups and
    spends the saved MACs on a wider hidden layer.
    """

    def __init__(self, out_channels: int, rng: np.random.Generator, grouped: bool = False, in_channels: int = 3) -> None:
        hidden = stem_hidden_width(out_channels, grouped)
        self.conv_a = Conv2d(in_channels, hidden, 3, rng, padding=1)
        self.bn_a = BatchNorm2d(hidden)
        self.conv_b = Conv2d(hidden, out_channels, 3, rng, padding=1, groups=STEM_GROUPS if grouped else 1)
        self.bn_b = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        x = self.bn_a(self.conv_a(x)).relu()
        return self.bn_b(self.conv_b(x))


class Classifier(Module):
    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator) -> None:
        self.linear = Linear(channels, num_classes, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear(F.global_avg_pool(x))

