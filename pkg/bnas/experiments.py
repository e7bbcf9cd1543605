"""Paired experiments: ablations, the layer-type study, quantization error,
and gradient spike counting."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .binarize import quantization_error_trials
from .cells import Classifier, Genotype
from .data import Dataset
from .deploy import CostReport, cost_report
from .layers import BatchNorm2d, Conv2d, Module, Sequential
from .search import SearchConfig, SearchResult, derive_genotype, run_search, selection_diversity_metric
from .searchspace import BIN_SEP_CONV_3X3, LayerType, layer_type, make_block
from .tensor import Tensor
from .trainer import NetworkConfig, TrainScheme, build_network, train

ABLATIONS = ("no_skip", "no_zeroise", "no_div", "no_dilconv", "with_sepconv")
SPIKE_FACTOR = 10.0
ENTROPY_EPOCH = 5
STUDY_KINDS = (
    "bin_conv_3x3",
    "bin_conv_5x5",
    "bin_dil_conv_3x3",
    "bin_dil_conv_5x5",
    "bin_sep_conv_3x3",
    "bin_sep_conv_5x5",
)


def spike_fraction(norms: Sequence[float], factor: float = SPIKE_FACTOR) -> float:
    """Share of steps whose norm exceeds `factor` x the median of the steps before it."""
    series = pd.Series(np.asarray(norms, dtype=np.float64))
    if len(series) < 2:
        return 0.0
    median = series.expanding().median().shift(1)
    judged = median.notna()
    return float((series[judged] > factor * median[judged]).mean())


# --- ablations -------------------------------------------------------------------------


class AblationConflict(ValueError):
    """The base configuration already has the mechanism switched off."""


def ablated_search_config(base: SearchConfig, which: str) -> SearchConfig:
    """`base` with exactly one mechanism toggled."""
    if which not in ABLATIONS:
        raise ValueError(f"unknown ablation {which!r}; choose from {', '.join(ABLATIONS)}")
    ops = base.layer_types
    if which == "no_skip":
        if not base.use_skip:
            raise AblationConflict("no_skip ablation needs inter-cell skips on in the base config")
        return replace(base, use_skip=False)
    if which == "no_zeroise":
        if math.isinf(base.gamma):
            raise AblationConflict("no_zeroise ablation needs a finite gamma in the base config")
        return replace(base, gamma=math.inf)
    if which == "no_div":
        if base.diversity_lambda == 0:
            raise AblationConflict("no_div ablation needs diversity_lambda > 0 in the base config")
        return replace(base, diversity_lambda=0.0)
    if which == "no_dilconv":
        kept = tuple(t.name for t in ops if t.family != "dil_conv")
        if len(kept) == len(ops):
            raise AblationConflict("no_dilconv ablation needs dilated kinds in the base search space")
        return replace(base, ops=kept)
    if any(t.family == "sep_conv" for t in ops):
        raise AblationConflict("with_sepconv ablation needs a base search space without separable kinds")
    names = [t.name for t in ops]
    names.insert(sum(t.has_params for t in ops), BIN_SEP_CONV_3X3.name)
    return replace(base, ops=tuple(names))


def sep_conv_proportion(genotype: Genotype) -> float:
    counts = genotype.ops()
    total = sum(counts.values())
    return sum(n for op, n in counts.items() if layer_type(op).family == "sep_conv") / total


@dataclass
class AblationArm:
    label: str
    search: SearchConfig
    genotype: Genotype
    result: SearchResult
    cost: CostReport
    test_acc: Optional[float] = None
    train_acc: Optional[float] = None

    @property
    def learnable(self) -> float:
        return selection_diversity_metric(self.result.history)

    @property
    def entropy_at(self) -> float:
        history = self.result.history
        return history[min(ENTROPY_EPOCH, len(history) - 1)].entropy

    @property
    def sep_proportion(self) -> float:
        return sep_conv_proportion(self.genotype)


@dataclass
class AblationResult:
    which: str
    baseline: AblationArm
    ablated: AblationArm

    @property
    def arms(self) -> Tuple[AblationArm, AblationArm]:
        return self.baseline, self.ablated

    def frame(self) -> pd.DataFrame:
        rows = []
        for arm in self.arms:
            rows.append(
                {
                    "model": arm.label,
                    "test_acc": arm.test_acc,
                    "train_acc": arm.train_acc,
                    "learnable_frac": arm.learnable,
                    "entropy": arm.entropy_at,
                    "zeroise_edges": arm.genotype.ops().get("zeroise", 0),
                    "sep_proportion": arm.sep_proportion,
                    "flops": arm.cost.flops,
                    "memory_savings": arm.cost.memory_savings,
                    "speedup": arm.cost.speedup,
                }
            )
        return pd.DataFrame(rows)


def _network_for(network: NetworkConfig, search: SearchConfig, genotype: Genotype) -> NetworkConfig:
    return replace(network, use_skip=network.use_skip and search.use_skip, gamma=genotype.gamma)


def run_ablation(
    which: str,
    search: SearchConfig,
    data: Dataset,
    network: NetworkConfig,
    scheme: Optional[TrainScheme] = None,
    test_set: Optional[Dataset] = None,
    seed: int = 0,
    on_arm: Optional[Callable[[AblationArm], None]] = None,
) -> AblationResult:
    """Search with and without one mechanism at a fixed seed; train both when a scheme is given.

    no_zeroise shares the baseline's search and only re-derives at γ = ∞.
    """
    ablated_cfg = ablated_search_config(search, which)
    base_result = run_search(search, data)
    if which == "no_zeroise":
        ablated_result = SearchResult(
            derive_genotype(base_result.state.arch, ablated_cfg.gamma, seed=search.seed),
            base_result.history,
            base_result.state,
        )
    else:
        ablated_result = run_search(ablated_cfg, data)

    arms = []
    for label, cfg, result in (("baseline", search, base_result), (which, ablated_cfg, ablated_result)):
        net_cfg = _network_for(network, cfg, result.genotype)
        arm = AblationArm(label, cfg, result.genotype, result, cost_report(result.genotype, net_cfg))
        if scheme is not None and test_set is not None:
            trained = train(build_network(result.genotype, net_cfg, seed), scheme, data, test_set, seed=seed)
            arm.test_acc = trained.final_test_acc
            arm.train_acc = trained.final_train_acc
        if on_arm is not None:
            on_arm(arm)
        arms.append(arm)
    return AblationResult(which, arms[0], arms[1])


# --- layer-type study ---------------------------------------------------------------


class LayerStack(Module):
    """Float stem conv, three blocks of a single layer kind, classifier."""

    def __init__(
        self,
        layer: LayerType,
        channels: int,
        num_classes: int,
        rng: np.random.Generator,
        precision: str = "binary",
        blocks: int = 3,
    ) -> None:
        if not layer.has_params:
            raise ValueError(f"the layer study stacks conv kinds, not {layer.name}")
        self.stem = Sequential(Conv2d(3, channels, 3, rng, padding=1), BatchNorm2d(channels))
        self.blocks = [make_block(layer, channels, 2 if i else 1, rng, precision) for i in range(blocks)]
        self.classifier = Classifier(channels, num_classes, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return self.classifier(x)

    def layer_groups(self):
        groups = {"stem": self.stem}
        for i, block in enumerate(self.blocks):
            groups[f"block_{i}"] = block
        groups["classifier"] = self.classifier
        return groups


def layer_study(
    train_set: Dataset,
    test_set: Dataset,
    scheme: TrainScheme,
    kinds: Sequence[str] = STUDY_KINDS,
    precisions: Sequence[str] = ("float", "binary"),
    channels: int = 16,
    seed: int = 0,
    on_row: Optional[Callable[[dict], None]] = None,
) -> pd.DataFrame:
    """Test accuracy of a 3-block net per (layer kind, precision)."""
    rows = []
    for kind in kinds:
        layer = layer_type(kind)
        for precision in precisions:
            net = LayerStack(layer, channels, train_set.num_classes, np.random.default_rng(seed), precision)
            result = train(net, scheme, train_set, test_set, seed=seed)
            row = {
                "kind": layer.name,
                "precision": precision,
                "train_acc": result.final_train_acc,
                "test_acc": result.final_test_acc,
            }
            if on_row is not None:
                on_row(row)
            rows.append(row)
    return pd.DataFrame(rows, columns=["kind", "precision", "train_acc", "test_acc"])


# --- quantization error -------------------------------------------------------------------


@dataclass(frozen=True)
class QuantizationSummary:
    trials: int
    plain_mean: float
    separable_mean: float
    separable_worse: float  # share of paired trials where the separable error is larger


def quantization_study(trials: int = 100, seed: int = 0, channels: int = 16, side: int = 8) -> QuantizationSummary:
    plain, separable = quantization_error_trials(trials, np.random.default_rng(seed), channels, side)
    return QuantizationSummary(
        trials,
        float(np.mean(plain)),
        float(np.mean(separable)),
        float(np.mean(separable > plain)),
    )
