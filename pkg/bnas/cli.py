"""CLI entrypoint for bnas.

Parses arguments, resolves the run config, then delegates to search,
trainer, deploy and experiments. Exit codes: 0 ok, 2 config error,
3 divergence, 4 I/O or dataset error.
"""
from __future__ import annotations

import argparse
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from rich.console import Console

from . import config as cfgmod
from . import data, deploy, experiments, plot, report, search, trainer
from .cells import Genotype
from .config import ConfigError, RunConfig
from .optim import Diverged

console = Console()
err_console = Console(stderr=True)

MIN_SPARK, MAX_SPARK = 20, 60
SPARK_MARGIN = 40
SYNTHETIC_TRAIN_SHARE = 0.8

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def parse_gamma(val) -> float:
    """γ >= 1; 'inf' switches Zeroise off at discretization.

    Raises ArgumentTypeError so argparse prints the message as is.
    """
    s = str(val).strip().lower()
    try:
        v = math.inf if s in ("inf", "infinity", "∞") else float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid gamma {val!r}: use a number >= 1 or inf")
    if math.isnan(v) or v < 1:
        raise argparse.ArgumentTypeError(f"gamma must be >= 1, got {val!r}")
    return v


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML run config; defaults apply to anything it leaves out")
    p.add_argument("--seed", type=int, help="Seed for data splits, initialization and batching")
    p.add_argument("--preset", help="Network preset: bnas-mini, bnas-a ... bnas-h")
    p.add_argument("--gamma", type=parse_gamma, help="Zeroise divisor used when deriving the genotype (>= 1, or inf)")
    p.add_argument("--scheme", choices=cfgmod.SCHEME_CHOICES, help="Training scheme")
    p.add_argument("--out", help="Output directory (default: runs/bnas)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = argparse.ArgumentParser(
        prog="bnas",
        description="Search, train and deploy binary convolutional architectures",
        epilog=(
            "examples:\n"
            "  bnas search --config run.toml              search, write genotype.json\n"
            "  bnas train runs/bnas/genotype.json         train the searched cells\n"
            "  bnas export runs/bnas/model.ckpt           write the bit-packed model\n"
            "  bnas bench runs/bnas/model.bnas            cost report and kernel timings\n"
            "  bnas ablate no_div --config run.toml       paired search with and without the regularizer"
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sub.add_parser("search", parents=[common], help="Run the differentiable search and derive a genotype")

    t = sub.add_parser("train", parents=[common], help="Train a network built from a genotype")
    t.add_argument("genotype", help="Genotype JSON written by search")

    e = sub.add_parser("eval", parents=[common], help="Test accuracy of a checkpoint or deployed model")
    e.add_argument("checkpoint")
    e.add_argument("--packed", action="store_true", help="Also run the XNOR/popcount path and compare predictions")

    b = sub.add_parser("bench", parents=[common], help="Cost report and float-vs-packed timing")
    b.add_argument("checkpoint")

    x = sub.add_parser("export", parents=[common], help="Write the deployed BNASBIN1 model")
    x.add_argument("checkpoint")
    x.add_argument("--output", help="Deployed model path (default: <out>/model.bnas)")

    a = sub.add_parser("ablate", parents=[common], help="Paired search (and training) with one mechanism off")
    a.add_argument("which", choices=experiments.ABLATIONS)
    a.add_argument("--no-train", action="store_true", help="Compare the searches only")

    g = sub.add_parser("plot", parents=[common], help="SVG figures from curve CSVs and gradient logs")
    g.add_argument("inputs", nargs="+", metavar="FILE", help="curve .csv or grads .bin files")

    s = sub.add_parser("layer-study", parents=[common], help="Accuracy per layer kind, float and binary")
    s.add_argument("--kinds", nargs="+", default=list(experiments.STUDY_KINDS), metavar="KIND")
    s.add_argument("--trials", type=int, default=100, help="Quantization error trials")
    return p


def spark_width(term_cols: int) -> int:
    return max(MIN_SPARK, min(MAX_SPARK, term_cols - SPARK_MARGIN))


def _error(msg: str) -> None:
    err_console.print(f"error: {msg}", style="red", markup=False, soft_wrap=True)


def _finite(obj: Any) -> Any:
    """NaN and inf become null so the JSON stays strict."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = cfgmod.load_config(args.config)
    return cfg.with_overrides(
        seed=args.seed,
        preset_name=args.preset,
        gamma=args.gamma,
        scheme=args.scheme,
        out=args.out,
    )


def load_datasets(cfg: RunConfig) -> Tuple[data.Dataset, data.Dataset]:
    d = cfg.data
    if d.source == "synthetic":
        full = data.synthetic_blobs(n=d.synthetic_size, seed=cfg.seed, side=d.synthetic_side)
        train_idx, test_idx = data.split_indices(len(full), data.SplitSpec(cfg.seed, SYNTHETIC_TRAIN_SHARE))
        train_set, test_set = data.subset(full, train_idx), data.subset(full, test_idx)
    else:
        train_set, test_set = data.load_cifar10_bin(d.path)
    return data.take(train_set, d.train_limit, cfg.seed), data.take(test_set, d.test_limit, cfg.seed)


def load_any_model(path) -> Tuple[trainer.Network, trainer.NetworkConfig, Genotype]:
    """A BNASCKPT checkpoint with its sidecar, or a deployed BNASBIN1 file."""
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(deploy.DEPLOY_MAGIC))
    if magic == deploy.DEPLOY_MAGIC:
        model = deploy.load_deployed(path)
        return model.network, model.config, model.genotype
    return trainer.load_model(path)


def _prepare_out(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out)
    return out


# --- subcommands -----------------------------------------------------------------------


def cmd_search(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    train_set, _ = load_datasets(cfg)
    console.print(f"searching on {len(train_set)} images, {cfg.search.num_cells} cells, {cfg.search.epochs} epochs")
    result = search.run_search(
        cfg.search,
        train_set,
        on_epoch=lambda r: console.print(report.search_epoch_line(r), markup=False, highlight=False),
    )
    result.genotype.save(out / "genotype.json")
    pd.DataFrame(result.history_rows()).to_csv(out / "search_metrics.csv", index=False)
    console.print(report.build_search_panel(result.genotype, result.history, spark_width(console.width)))
    console.print(f"wrote {out / 'genotype.json'}", style="dim")
    return EXIT_OK


def cmd_train(cfg: RunConfig, genotype_path: str) -> int:
    genotype = Genotype.load(genotype_path)
    out = _prepare_out(cfg)
    train_set, test_set = load_datasets(cfg)
    net_cfg = cfg.train.network(train_set.num_classes, train_set.side)
    scheme = cfg.train.train_scheme()
    net = trainer.build_network(genotype, net_cfg, cfg.seed)
    result = trainer.train(
        net,
        scheme,
        train_set,
        test_set,
        seed=cfg.seed,
        on_epoch=lambda p: console.print(report.train_epoch_line(p), markup=False, highlight=False),
    )
    trainer.save_model(out / "model.ckpt", net, net_cfg, genotype, cfg.seed)
    result.curve_frame().to_csv(out / "curve.csv", index=False)
    result.grad_log.write(out / "grads.bin")
    console.print(report.build_train_panel(result, net_cfg, scheme, spark_width(console.width)))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str, packed: bool = False) -> int:
    net, net_cfg, _ = load_any_model(checkpoint)
    _prepare_out(cfg)
    _, test_set = load_datasets(cfg)
    predictions = trainer.predict(net, test_set)
    accuracy = float(np.mean(predictions == test_set.labels)) if len(test_set) else float("nan")
    packed_acc = agreement = None
    if packed:
        with deploy.packed_inference(net, cfg.deploy.native_popcount):
            packed_predictions = trainer.predict(net, test_set)
        packed_acc = float(np.mean(packed_predictions == test_set.labels))
        agreement = float(np.mean(packed_predictions == predictions))
    console.print(report.build_eval_panel(net_cfg.name, accuracy, len(test_set), packed_acc, agreement))
    return EXIT_OK


def cmd_bench(cfg: RunConfig, checkpoint: str) -> int:
    net, net_cfg, genotype = load_any_model(checkpoint)
    out = _prepare_out(cfg)
    _, test_set = load_datasets(cfg)
    cost = deploy.cost_report(genotype, net_cfg)
    (out / "cost.json").write_text(cost.to_json(), encoding="utf-8")

    sample = data.take(test_set, cfg.deploy.bench_samples, cfg.seed)
    timing_images = data.as_batch(sample, np.arange(min(len(sample), cfg.deploy.timing_batch))).images
    timings = deploy.time_layers(net, timing_images, cfg.deploy.repeats)
    pd.DataFrame(
        [
            {"layer": t.name, "input": "x".join(map(str, t.input_shape)), "float_ms": t.float_ms, "packed_ms": t.packed_ms}
            for t in timings
        ],
        columns=["layer", "input", "float_ms", "packed_ms"],
    ).to_csv(out / "timing.csv", index=False)

    console.print(report.build_cost_panel(net_cfg.name, cost, timings))
    float_predictions = trainer.predict(net, sample)
    with deploy.packed_inference(net, cfg.deploy.native_popcount):
        packed_predictions = trainer.predict(net, sample)
    agreement = float(np.mean(float_predictions == packed_predictions)) if len(sample) else float("nan")
    console.print(
        report.build_eval_panel(
            net_cfg.name,
            float(np.mean(float_predictions == sample.labels)) if len(sample) else float("nan"),
            len(sample),
            float(np.mean(packed_predictions == sample.labels)) if len(sample) else None,
            agreement,
        )
    )
    return EXIT_OK


def cmd_export(cfg: RunConfig, checkpoint: str, output: Optional[str] = None) -> int:
    net, net_cfg, genotype = trainer.load_model(checkpoint)
    out = _prepare_out(cfg)
    target = Path(output) if output else out / "model.bnas"
    cost = deploy.export_model(target, net, net_cfg, genotype, cfg.seed)
    (out / "cost.json").write_text(cost.to_json(), encoding="utf-8")
    console.print(report.build_cost_panel(net_cfg.name, cost))
    console.print(f"wrote {target}", style="dim")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, which: str, with_training: bool = True) -> int:
    out = _prepare_out(cfg)
    train_set, test_set = load_datasets(cfg)
    try:
        result = experiments.run_ablation(
            which,
            cfg.search,
            train_set,
            cfg.train.network(train_set.num_classes, train_set.side),
            scheme=cfg.train.train_scheme() if with_training else None,
            test_set=test_set if with_training else None,
            seed=cfg.seed,
            on_arm=lambda arm: console.print(f"finished {arm.label}", style="dim"),
        )
    except experiments.AblationConflict as e:
        raise ConfigError(str(e)) from None
    result.baseline.genotype.save(out / "genotype_baseline.json")
    result.ablated.genotype.save(out / f"genotype_{which}.json")
    result.frame().to_csv(out / f"ablation_{which}.csv", index=False)
    console.print(report.build_ablation_table(result))
    return EXIT_OK


def cmd_plot(cfg: RunConfig, inputs: List[str]) -> int:
    out = _prepare_out(cfg)
    curves: Dict[str, pd.DataFrame] = {}
    logs: Dict[str, trainer.GradLog] = {}
    for name in inputs:
        path = Path(name)
        label = path.parent.name or path.stem
        if path.suffix.lower() == ".csv":
            curves[label] = plot.read_curve(path)
        elif path.suffix.lower() == ".bin":
            logs[label] = trainer.GradLog.read(path)
        else:
            raise ConfigError(f"cannot plot '{path.suffix}' files: use curve .csv or grads .bin")
    written = []
    if curves:
        written.append(plot.plot_curves(curves, out / "curves.svg"))
    if logs:
        written.append(plot.plot_grad_log(logs, out / "grads.svg"))
        for label, log in logs.items():
            console.print(f"{label}: {report.fmt_percent(experiments.spike_fraction(log.totals))} of steps spike", markup=False)
    for path in written:
        console.print(f"wrote {path}", style="dim")
    return EXIT_OK


def cmd_layer_study(cfg: RunConfig, kinds: List[str], trials: int) -> int:
    out = _prepare_out(cfg)
    train_set, test_set = load_datasets(cfg)
    frame = experiments.layer_study(
        train_set,
        test_set,
        cfg.train.train_scheme(),
        kinds=kinds,
        seed=cfg.seed,
        on_row=lambda row: console.print(
            f"{row['kind']:<18} {row['precision']:<7} test {report.fmt_percent(row['test_acc'])}", markup=False
        ),
    )
    frame.to_csv(out / "layer_study.csv", index=False)
    quant = experiments.quantization_study(trials, cfg.seed)
    console.print(report.build_layer_study_panel(frame, quant))
    return EXIT_OK


def _dispatch(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.command == "search":
        return cmd_search(cfg)
    if args.command == "train":
        return cmd_train(cfg, args.genotype)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint, args.packed)
    if args.command == "bench":
        return cmd_bench(cfg, args.checkpoint)
    if args.command == "export":
        return cmd_export(cfg, args.checkpoint, args.output)
    if args.command == "ablate":
        return cmd_ablate(cfg, args.which, not args.no_train)
    if args.command == "plot":
        return cmd_plot(cfg, args.inputs)
    return cmd_layer_study(cfg, args.kinds, args.trials)


def _write_divergence(cfg: RunConfig, snapshot: Dict[str, Any]) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / "divergence.json"
    path.write_text(json.dumps(_finite(snapshot), indent=2, allow_nan=False, default=str) + "\n", encoding="utf-8")
    return path


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        _error(str(e))
        return EXIT_CONFIG
    except OSError as e:
        _error(f"could not read config: {e}")
        return EXIT_IO

    try:
        return _dispatch(args, cfg)
    except ConfigError as e:
        _error(str(e))
        return EXIT_CONFIG
    except Diverged as e:
        path = _write_divergence(cfg, e.snapshot)
        _error(f"{e} (snapshot in {path})")
        return EXIT_DIVERGED
    except data.DatasetError as e:
        _error(str(e))
        return EXIT_IO
    except OSError as e:
        _error(f"{getattr(e, 'filename', None) or 'I/O'}: {e.strerror or e}")
        return EXIT_IO
    except ValueError as e:
        # malformed genotype, checkpoint or gradient log
        _error(str(e))
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
