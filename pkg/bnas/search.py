"""Diversity-regularized differentiable search, and discretization.

Each step alternates, first order:

1. architecture update on a validation batch, minimizing
   task loss - λ · H(p) · exp(-t / τ), weights untouched;
2. weight update on a training batch, minimizing the task loss, logits
   untouched.

H(p) is the mean over edges of both cell kinds of the per-edge softmax
entropy (natural log); t is the 0-based epoch.

Discretization keeps Zeroise only when it wins after division by γ, then
retains the two strongest incoming edges per node.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .cells import (
    NUM_NODES,
    ArchParams,
    CellSpec,
    Classifier,
    Genotype,
    Stem,
    SuperCell,
    output_channels,
    plan_cells,
)
from .data import Dataset, SplitSpec, batches, split_indices, subset
from .layers import Module
from .optim import (
    Diverged,
    LrSchedule,
    OptimizerState,
    adam,
    clip_grad_norm,
    lr_at,
    sgd,
    step,
    zero_grad,
)
from .searchspace import SEARCH_SPACE, ZEROISE, LayerType, layer_type
from .tensor import NonFiniteError, Tensor, concat, cross_entropy, exp, log_softmax

LEARNABLE_WINDOW = 20  # epochs averaged by selection_diversity_metric


@dataclass
class SearchConfig:
    num_cells: int = 8
    init_channels: int = 16
    epochs: int = 50
    batch_size: int = 64
    weight_lr: float = 0.025
    weight_lr_min: float = 0.0
    weight_momentum: float = 0.9
    weight_decay: float = 3e-4
    diversity_lambda: float = 1.0
    diversity_tau: float = 7.7
    arch_lr: float = 3e-4
    arch_beta1: float = 0.5
    arch_beta2: float = 0.999
    arch_weight_decay: float = 0.0
    grad_clip: float = 5.0
    gamma: float = 1.0
    seed: int = 0
    use_skip: bool = True
    train_fraction: float = 0.5
    ops: Tuple[str, ...] = tuple(t.name for t in SEARCH_SPACE)

    def __post_init__(self) -> None:
        self.ops = tuple(self.ops)
        if self.diversity_lambda < 0:
            raise ValueError(f"diversity_lambda must be >= 0, got {self.diversity_lambda}")
        if self.diversity_tau <= 0:
            raise ValueError(f"diversity_tau must be > 0, got {self.diversity_tau}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.gamma < 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.num_cells < 1 or self.init_channels < 1 or self.batch_size < 1:
            raise ValueError("num_cells, init_channels and batch_size must be positive")
        for name in self.ops:
            layer_type(name)

    @property
    def layer_types(self) -> Tuple[LayerType, ...]:
        return tuple(layer_type(name) for name in self.ops)


class SearchNetwork(Module):
    """Stem, a stack of supercells, classifier. Logits live outside the module."""

    def __init__(self, config: SearchConfig, arch: ArchParams, num_classes: int, rng: np.random.Generator, image_side: int = 32) -> None:
        plan = plan_cells(config.num_cells, config.init_channels, image_side)
        self.stem = Stem(plan[0].c_prev, rng)
        self.cells = [
            SuperCell(p.c_prevprev, p.c_prev, p.channels, p.reduction, p.reduction_prev, rng, arch.ops, config.use_skip)
            for p in plan
        ]
        self.classifier = Classifier(output_channels(plan), num_classes, rng)
        self.arch = arch

    def forward(self, x: Tensor) -> Tensor:
        weights = {False: self.arch.weights(False), True: self.arch.weights(True)}
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s1, s0, weights[cell.reduction])
        return self.classifier(s1)


# --- regularizer --------------------------------------------------------------------


def arch_entropy(arch: ArchParams) -> Tensor:
    """Mean per-edge entropy over both cell kinds."""
    rows = []
    for reduction in (False, True):
        logp = log_softmax(arch.logits(reduction), axis=-1)
        rows.append(-(exp(logp) * logp).sum(axis=-1))
    return concat(rows, axis=0).mean()


def annealing(t: float, tau: float) -> float:
    return math.exp(-t / tau)


def diversity_term(arch: ArchParams, t: float, lam: float, tau: float) -> Tensor:
    if t < 0:
        raise ValueError(f"epoch index must be >= 0, got {t}")
    return arch_entropy(arch) * (-lam * annealing(t, tau))


def diversity_loss(task_loss: Tensor, arch: ArchParams, t: float, lam: float, tau: float) -> Tensor:
    return task_loss + diversity_term(arch, t, lam, tau)


# --- state and steps ------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    val_acc: float
    entropy: float
    learnable_frac: float
    reg_term: float


@dataclass
class SearchState:
    config: SearchConfig
    net: SearchNetwork
    weight_opt: OptimizerState
    arch_opt: OptimizerState
    schedule: LrSchedule
    epoch: int = 0
    steps: int = 0
    history: List[EpochRecord] = field(default_factory=list)
    meters: Dict[str, float] = field(default_factory=dict)

    @property
    def arch(self) -> ArchParams:
        return self.net.arch

    def reset_meters(self) -> None:
        self.meters = {"train_correct": 0, "train_seen": 0, "val_correct": 0, "val_seen": 0, "reg_term": 0.0}


def init_search(config: SearchConfig, num_classes: int = 10, image_side: int = 32) -> SearchState:
    rng = np.random.default_rng(config.seed)
    arch = ArchParams.initialize(rng, config.layer_types)
    net = SearchNetwork(config, arch, num_classes, rng, image_side)
    weight_opt = sgd(net.parameters(), config.weight_lr, config.weight_momentum, config.weight_decay)
    arch_opt = adam(
        arch.parameters(),
        config.arch_lr,
        betas=(config.arch_beta1, config.arch_beta2),
        weight_decay=config.arch_weight_decay,
    )
    schedule = LrSchedule("cosine", config.weight_lr, config.weight_lr_min, config.epochs)
    state = SearchState(config, net, weight_opt, arch_opt, schedule)
    state.reset_meters()
    return state


def _correct(logits: Tensor, labels: np.ndarray) -> int:
    return int(np.sum(logits.data.argmax(axis=1) == labels))


def arch_step(state: SearchState, images: np.ndarray, labels: np.ndarray) -> float:
    """One logit update on a validation batch. Returns the regularizer value."""
    cfg = state.config
    state.net.train()
    zero_grad(state.arch_opt)
    logits = state.net(Tensor(images))
    term = diversity_term(state.arch, state.epoch, cfg.diversity_lambda, cfg.diversity_tau)
    loss = cross_entropy(logits, labels) + term
    loss.backward(inputs=state.arch_opt.params)
    step(state.arch_opt)
    state.meters["val_correct"] += _correct(logits, labels)
    state.meters["val_seen"] += len(labels)
    return term.item()


def weight_step(state: SearchState, images: np.ndarray, labels: np.ndarray) -> float:
    """One SGD update of the network weights on a training batch. Returns the loss."""
    state.net.train()
    zero_grad(state.weight_opt)
    logits = state.net(Tensor(images))
    loss = cross_entropy(logits, labels)
    loss.backward(inputs=state.weight_opt.params)
    clip_grad_norm(state.weight_opt.params, state.config.grad_clip)
    step(state.weight_opt)
    state.meters["train_correct"] += _correct(logits, labels)
    state.meters["train_seen"] += len(labels)
    return loss.item()


def search_step(state: SearchState, train_batch, val_batch) -> SearchState:
    """Architecture step on `val_batch`, then weight step on `train_batch`."""
    try:
        reg = arch_step(state, val_batch.images, val_batch.labels)
        weight_step(state, train_batch.images, train_batch.labels)
    except NonFiniteError as e:
        raise Diverged(
            f"search diverged at epoch {state.epoch}, step {state.steps}: {e}",
            {
                "phase": "search",
                "epoch": state.epoch,
                "step": state.steps,
                "weight_lr": state.weight_opt.lr,
                "last_epoch": asdict(state.history[-1]) if state.history else None,
                "error": str(e),
            },
        ) from e
    state.meters["reg_term"] = reg
    state.steps += 1
    return state


def finish_epoch(state: SearchState) -> EpochRecord:
    m = state.meters
    record = EpochRecord(
        epoch=state.epoch,
        train_acc=m["train_correct"] / max(m["train_seen"], 1),
        val_acc=m["val_correct"] / max(m["val_seen"], 1),
        entropy=arch_entropy(state.arch).item(),
        learnable_frac=learnable_fraction(state.arch),
        reg_term=m["reg_term"],
    )
    state.history.append(record)
    state.epoch += 1
    state.reset_meters()
    return record


@dataclass
class SearchResult:
    genotype: Genotype
    history: List[EpochRecord]
    state: SearchState

    def history_rows(self) -> List[Dict[str, float]]:
        return [asdict(r) for r in self.history]


def run_search(
    config: SearchConfig,
    data: Dataset,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> SearchResult:
    """Split `data` in two by seed, search for `config.epochs` epochs, derive the genotype."""
    split = SplitSpec(seed=config.seed, fraction=config.train_fraction)
    train_idx, val_idx = split_indices(len(data), split)
    train_set, val_set = subset(data, train_idx), subset(data, val_idx)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError(f"cannot search on {len(data)} images: one half of the split is empty")

    state = init_search(config, data.num_classes, data.side)
    for epoch in range(config.epochs):
        state.weight_opt.lr = lr_at(state.schedule, epoch)
        train_batches = batches(train_set, config.batch_size, seed=(config.seed, epoch, 0), augmentation="flip+crop")
        val_batches = batches(val_set, config.batch_size, seed=(config.seed, epoch, 1), augmentation="flip+crop")
        for train_batch, val_batch in zip(train_batches, val_batches):
            search_step(state, train_batch, val_batch)
        record = finish_epoch(state)
        if on_epoch is not None:
            on_epoch(record)
    genotype = derive_genotype(state.arch, config.gamma, seed=config.seed)
    return SearchResult(genotype, state.history, state)


# --- discretization ------------------------------------------------------------------


def select_op(weights: Sequence[float], ops: Sequence[Union[LayerType, str]], gamma: float) -> Tuple[int, float]:
    """Index and strength of the op chosen on one edge; Zeroise competes at weight / γ."""
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    scores = np.array(weights, dtype=np.float64)
    if scores.shape != (len(ops),):
        raise ValueError(f"{len(ops)} ops but {scores.shape} weights")
    for i, op in enumerate(ops):
        if layer_type(op) is ZEROISE:
            scores[i] = scores[i] / gamma
    best = int(np.argmax(scores))
    return best, float(scores[best])


def derive_cell(probs: np.ndarray, ops: Sequence[LayerType], gamma: float):
    edges = CellSpec().edges
    chosen = [select_op(row, ops, gamma) for row in probs]
    cell = []
    for dst in range(2, 2 + NUM_NODES):
        incoming = [(chosen[e][1], src, ops[chosen[e][0]].name) for e, (src, d) in enumerate(edges) if d == dst]
        # strongest first; on equal strength the lower source wins
        incoming.sort(key=lambda item: (-item[0], item[1]))
        cell.append(tuple(sorted((src, op) for _, src, op in incoming[:2])))
    return tuple(cell)


def derive_genotype(arch: ArchParams, gamma: float = 1.0, seed: Optional[int] = None) -> Genotype:
    return Genotype(
        derive_cell(arch.probabilities(False), arch.ops, gamma),
        derive_cell(arch.probabilities(True), arch.ops, gamma),
        gamma,
        seed,
    )


def learnable_fraction(arch: ArchParams) -> float:
    """Share of edges (both kinds) whose plain argmax op has parameters."""
    picks = [
        arch.ops[i].has_params
        for reduction in (False, True)
        for i in arch.probabilities(reduction).argmax(axis=1)
    ]
    return float(np.mean(picks))


def selection_diversity_metric(history: Sequence[Union[EpochRecord, float]], first: int = LEARNABLE_WINDOW) -> float:
    """Mean learnable-op fraction over the first `first` epochs."""
    values = [r.learnable_frac if isinstance(r, EpochRecord) else float(r) for r in history[:first]]
    if not values:
        raise ValueError("no epochs recorded")
    return float(np.mean(values))


def relative_increase(treated: float, baseline: float) -> float:
    if baseline == 0:
        return math.inf if treated > 0 else 0.0
    return (treated - baseline) / baseline
