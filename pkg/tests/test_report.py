import math

import pandas as pd
import pytest
from rich.console import Console

from bnas import report
from bnas.cells import uniform_genotype
from bnas.deploy import CostReport, LayerTiming
from bnas.experiments import QuantizationSummary
from bnas.search import EpochRecord
from bnas.trainer import CurvePoint, GradLog, NetworkConfig, TrainResult, make_scheme


def _render(renderable) -> str:
    console = Console(width=140, record=True)
    console.print(renderable)
    return console.export_text()


def _cost(**overrides) -> CostReport:
    base = dict(
        binary_ops=64_000_000,
        float_ops=2_000_000,
        flops=3_000_000.0,
        param_bits_binary=8 * 1024 * 40,
        param_bits_float=32 * 1000,
        memory_savings=21.5,
        speedup=12.25,
        reference_float_ops=40_000_000,
        reference_param_bits=32 * 400_000,
    )
    base.update(overrides)
    return CostReport(**base)


def _curve(pairs):
    return [CurvePoint(i + 1, tr, te, 0.01, 1.0) for i, (tr, te) in enumerate(pairs)]


def test_fit_grade_labels():
    assert report.fit_grade("underfitting") == ("Underfitting", "yellow")
    assert report.fit_grade("overfitting") == ("Overfitting", "red")
    assert report.fit_grade("balanced") == ("Balanced", "green")


def test_percent_keeps_the_sign():
    assert report.fmt_percent(-0.3512) == "-35.12%"
    assert report.fmt_percent(0.5) == "50.00%"


@pytest.mark.parametrize("fmt", [report.fmt_percent, report.fmt_unit, report.fmt_ratio])
def test_missing_values_render_as_a_dash(fmt):
    assert fmt(None) == report.DASH
    assert fmt(float("nan")) == report.DASH


def test_gamma_formatting():
    assert report.fmt_gamma(math.inf) == "∞"
    assert report.fmt_gamma(2.0) == "2"
    assert report.fmt_gamma(0.5) == "0.5"


def test_epoch_lines_carry_the_numbers():
    line = report.search_epoch_line(EpochRecord(3, 0.5, 0.25, 1.2346, 0.75, -0.5))
    assert "epoch   3" in line
    assert "25.00%" in line and "1.235" in line and "75.00%" in line
    assert "1.00e-02" in report.train_epoch_line(CurvePoint(1, 0.4, 0.3, 0.01, 2.0))


def test_genotype_table_lists_every_node_and_the_gamma():
    out = _render(report.genotype_table(uniform_genotype("bin_conv_3x3", gamma=math.inf)))
    assert "γ = ∞" in out
    assert out.count("bin_conv_3x3 ←") == 16


def test_search_panel_renders_with_and_without_history():
    g = uniform_genotype("bin_dil_conv_3x3")
    history = [EpochRecord(1, 0.3, 0.2, 1.9, 0.9, -1.0), EpochRecord(2, 0.5, 0.4, 1.5, 0.8, -0.5)]
    out = _render(report.build_search_panel(g, history))
    assert "40.00%" in out
    assert "bin_dil_conv_3x3 x16" in out
    assert "Search" in _render(report.build_search_panel(g, []))


def test_train_panel_shows_the_fit_grade():
    # train ahead of test by more than the overfitting gap at the end
    result = TrainResult(None, _curve([(0.6, 0.5), (0.95, 0.6)]), GradLog(["stem"]))
    cfg = NetworkConfig("tiny", num_cells=3, init_channels=4, num_classes=2, image_side=8)
    out = _render(report.build_train_panel(result, cfg, make_scheme("standard", epochs=2)))
    assert "Fit: Overfitting" in out
    assert "95.00%" in out and "60.00%" in out
    assert "tiny: 3 cells" in out


def test_train_panel_with_an_empty_curve_uses_dashes():
    result = TrainResult(None, [], GradLog([]))
    out = _render(report.build_train_panel(result, NetworkConfig(), make_scheme("minimal_reg", epochs=1)))
    assert out.count(report.DASH) >= 2
    assert "Fit: Balanced" in out


def test_eval_panel_shows_agreement_only_when_given():
    assert "Agreement" not in _render(report.build_eval_panel("m", 0.5, 10))
    out = _render(report.build_eval_panel("m", 0.5, 10, packed=0.5, agreement=1.0))
    assert "Packed accuracy" in out and "100.00%" in out


def test_cost_panel_uses_human_units():
    timings = [LayerTiming("cells.0.conv", (1, 16, 8, 8), 2.0, 1.0)]
    out = _render(report.build_cost_panel("bnas-mini", _cost(), timings))
    assert "64.00M" in out
    assert "40.00 KiB" in out
    assert "21.50x" in out
    assert "cells.0.conv" in out and "1x16x8x8" in out


def test_cost_panel_without_timings_has_no_timing_table():
    assert "packed conv" not in _render(report.build_cost_panel("x", _cost()))


def test_layer_study_panel_pivots_precisions_into_columns():
    frame = pd.DataFrame(
        [
            {"kind": "bin_conv_3x3", "precision": "float", "train_acc": 0.9, "test_acc": 0.8},
            {"kind": "bin_conv_3x3", "precision": "binary", "train_acc": 0.7, "test_acc": 0.6},
            {"kind": "bin_sep_conv_3x3", "precision": "float", "train_acc": 0.9, "test_acc": 0.75},
        ]
    )
    out = _render(report.build_layer_study_panel(frame, QuantizationSummary(10, 0.2, 0.4, 0.9)))
    assert "Float" in out and "Binary" in out
    assert "80.00%" in out and "60.00%" in out
    # the separable kind has no binary row
    assert report.DASH in out
    assert "over 10 trials" in out and "90.00%" in out
