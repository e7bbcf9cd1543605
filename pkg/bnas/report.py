"""Rendering of search, training and deployment reports using rich."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import pandas as pd
from rich import box
from rich.console import Group
from rich.panel import Panel
from rich.table import Table
from rich.text import Text

from . import utils
from .cells import Genotype, NUM_NODES
from .deploy import CostReport, LayerTiming
from .experiments import AblationResult, QuantizationSummary
from .search import EpochRecord
from .trainer import CurvePoint, NetworkConfig, TrainResult, TrainScheme

DASH = "—"


def _missing(x) -> bool:
    return x is None or (isinstance(x, float) and not math.isfinite(x))


def fmt_percent(x: Optional[float]) -> str:
    if _missing(x):
        return DASH
    return f"{x * 100:.2f}%"


def fmt_unit(x: Optional[float]) -> str:
    """Plain numbers: entropies, norms, losses."""
    if _missing(x):
        return DASH
    return f"{x:.3f}"


def fmt_ratio(x: Optional[float]) -> str:
    if _missing(x):
        return DASH
    return f"{x:.2f}x"


def fmt_gamma(gamma: float) -> str:
    return "∞" if math.isinf(gamma) else f"{gamma:g}"


def fit_grade(diagnosis: str) -> tuple[str, str]:
    """Label and color for a fit diagnosis."""
    if diagnosis == "underfitting":
        return "Underfitting", "yellow"
    if diagnosis == "overfitting":
        return "Overfitting", "red"
    return "Balanced", "green"


# --- per-epoch lines ---------------------------------------------------------------


def search_epoch_line(r: EpochRecord) -> str:
    return (
        f"epoch {r.epoch:>3}  train {fmt_percent(r.train_acc):>7}  val {fmt_percent(r.val_acc):>7}  "
        f"H(p) {fmt_unit(r.entropy)}  learnable {fmt_percent(r.learnable_frac)}"
    )


def train_epoch_line(p: CurvePoint) -> str:
    return (
        f"epoch {p.epoch:>3}  lr {p.lr:.2e}  loss {fmt_unit(p.train_loss)}  "
        f"train {fmt_percent(p.train_acc):>7}  test {fmt_percent(p.test_acc):>7}"
    )


# --- genotype --------------------------------------------------------------------------


def genotype_table(genotype: Genotype) -> Table:
    t = Table(title=f"Genotype (γ = {fmt_gamma(genotype.gamma)})", box=box.SIMPLE)
    t.add_column("Node")
    t.add_column("Normal cell")
    t.add_column("Reduction cell")
    for node in range(NUM_NODES):
        cells = []
        for edges in (genotype.normal[node], genotype.reduce[node]):
            parts = [Text(f"{op} ← {src}", style="dim" if op == "zeroise" else "") for src, op in edges]
            cells.append(Text("\n").join(parts))
        t.add_row(str(node + 2), *cells)
    return t


def build_search_panel(genotype: Genotype, history: Sequence[EpochRecord], spark_width: int = 40) -> Panel:
    grid = Table.grid(padding=(0, 2))
    grid.add_column(style="dim")
    grid.add_column()
    grid.add_row("Epochs", str(len(history)))
    if history:
        last = history[-1]
        grid.add_row("Val acc", fmt_percent(last.val_acc))
        grid.add_row("Entropy", f"{fmt_unit(history[0].entropy)} → {fmt_unit(last.entropy)}")
        grid.add_row("Learnable", utils.sparkline([r.learnable_frac for r in history][-spark_width:], 0.0, 1.0))
        grid.add_row("Val spark", utils.sparkline([r.val_acc for r in history][-spark_width:]))
    ops = genotype.ops()
    grid.add_row("Ops", ", ".join(f"{op} x{n}" for op, n in sorted(ops.items())))
    body = Group(Panel.fit(grid, title=Text("Search", style="bold")), genotype_table(genotype))
    return Panel.fit(body, box=box.ROUNDED)


# --- training ----------------------------------------------------------------------------


def build_train_panel(result: TrainResult, config: NetworkConfig, scheme: TrainScheme, spark_width: int = 40) -> Panel:
    grid = Table.grid(padding=(0, 2))
    grid.add_column(style="dim")
    grid.add_column()
    grid.add_row("Network", f"{config.name}: {config.num_cells} cells, C = {config.init_channels}, {config.precision}")
    grid.add_row("Scheme", f"{scheme.kind} ({scheme.optimizer}, {scheme.schedule}, {scheme.epochs} epochs)")
    grid.add_row("Train acc", fmt_percent(result.final_train_acc))
    grid.add_row("Test acc", fmt_percent(result.final_test_acc))
    grid.add_row("Test spark", utils.sparkline([p.test_acc for p in result.curve][-spark_width:], 0.0, 1.0))
    grade, color = fit_grade(result.diagnosis)
    body = Group(
        Panel.fit(grid, title=Text("Training", style="bold")),
        Text(f"Fit: {grade}", style=f"bold {color}"),
    )
    return Panel.fit(body, box=box.ROUNDED)


def build_eval_panel(name: str, accuracy: float, samples: int, packed: Optional[float] = None, agreement: Optional[float] = None) -> Panel:
    grid = Table.grid(padding=(0, 2))
    grid.add_column(style="dim")
    grid.add_column()
    grid.add_row("Model", name)
    grid.add_row("Samples", str(samples))
    grid.add_row("Accuracy", fmt_percent(accuracy))
    if packed is not None:
        grid.add_row("Packed accuracy", fmt_percent(packed))
    if agreement is not None:
        style = "green" if agreement == 1.0 else "red"
        grid.add_row("Agreement", Text(fmt_percent(agreement), style=style))
    return Panel.fit(grid, title=Text("Evaluation", style="bold"), box=box.ROUNDED)


# --- deployment ------------------------------------------------------------------------


def _cost_table(report: CostReport) -> Table:
    t = Table(title="Cost", box=box.SIMPLE)
    t.add_column("Metric")
    t.add_column("Value", justify="right")
    rows = [
        ("Binary ops", utils.human_number(report.binary_ops)),
        ("Float ops", utils.human_number(report.float_ops)),
        ("FLOPs (binary / 64)", utils.human_number(report.flops)),
        ("Binary params", utils.human_bytes(report.param_bits_binary)),
        ("Float params", utils.human_bytes(report.param_bits_float)),
        ("Float reference FLOPs", utils.human_number(report.reference_float_ops)),
        ("Float reference params", utils.human_bytes(report.reference_param_bits)),
        ("Memory savings", fmt_ratio(report.memory_savings)),
        ("Speed-up", fmt_ratio(report.speedup)),
    ]
    for k, v in rows:
        t.add_row(k, v)
    return t


def _timing_table(timings: Sequence[LayerTiming]) -> Table:
    t = Table(title="Float vs packed conv (best of N, ms)", box=box.SIMPLE)
    t.add_column("Layer")
    t.add_column("Input", justify="right")
    t.add_column("Float", justify="right")
    t.add_column("Packed", justify="right")
    t.add_column("Ratio", justify="right")
    for timing in timings:
        faster = timing.ratio > 1.0
        t.add_row(
            timing.name,
            "x".join(str(d) for d in timing.input_shape),
            f"{timing.float_ms:.2f}",
            f"{timing.packed_ms:.2f}",
            Text(fmt_ratio(timing.ratio), style="green" if faster else "yellow"),
        )
    return t


def build_cost_panel(name: str, report: CostReport, timings: Optional[Sequence[LayerTiming]] = None) -> Panel:
    parts = [Text(name, style="bold"), _cost_table(report)]
    if timings:
        parts.append(_timing_table(timings))
    return Panel.fit(Group(*parts), box=box.ROUNDED)


# --- experiments ---------------------------------------------------------------------------


def build_ablation_table(result: AblationResult) -> Table:
    frame = result.frame()
    t = Table(title=f"Ablation: {result.which}", box=box.SIMPLE)
    t.add_column("Model")
    t.add_column("Test acc", justify="right")
    t.add_column("Learnable", justify="right")
    t.add_column("H(p)", justify="right")
    t.add_column("Zeroise", justify="right")
    t.add_column("Sep. conv", justify="right")
    t.add_column("FLOPs", justify="right")
    t.add_column("Savings", justify="right")
    for row in frame.itertuples(index=False):
        t.add_row(
            row.model,
            fmt_percent(None if pd.isna(row.test_acc) else row.test_acc),
            fmt_percent(row.learnable_frac),
            fmt_unit(row.entropy),
            str(row.zeroise_edges),
            fmt_percent(row.sep_proportion),
            utils.human_number(row.flops),
            fmt_ratio(row.memory_savings),
        )
    return t


def build_layer_study_panel(frame: pd.DataFrame, quant: Optional[QuantizationSummary] = None) -> Panel:
    t = Table(title="Test accuracy by layer kind", box=box.SIMPLE)
    t.add_column("Kind")
    precisions = list(dict.fromkeys(frame["precision"]))
    for precision in precisions:
        t.add_column(precision.capitalize(), justify="right")
    for kind, rows in frame.groupby("kind", sort=False):
        by_precision = dict(zip(rows["precision"], rows["test_acc"]))
        t.add_row(kind, *(fmt_percent(by_precision.get(p)) for p in precisions))
    parts = [t]
    if quant is not None:
        parts.append(
            Text(
                f"Quantization error over {quant.trials} trials: plain {fmt_unit(quant.plain_mean)}, "
                f"separable {fmt_unit(quant.separable_mean)} "
                f"(separable larger in {fmt_percent(quant.separable_worse)})",
                style="bold",
            )
        )
    return Panel.fit(Group(*parts), box=box.ROUNDED)
