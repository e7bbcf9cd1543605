"""SVG figures: learning curves from curve CSVs, gradient magnitudes from grad logs."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .trainer import GradLog  # noqa: E402

CURVE_COLUMNS = ("epoch", "train_acc", "test_acc")

PathLike = Union[str, Path]


def read_curve(path: PathLike) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = [c for c in CURVE_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path} is not a curve CSV: missing {', '.join(missing)}")
    return frame


def plot_curves(curves: Mapping[str, pd.DataFrame], path: PathLike, title: Optional[str] = None) -> Path:
    """Train accuracy on the left, test accuracy on the right, one line per run."""
    if not curves:
        raise ValueError("nothing to plot")
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for label, frame in curves.items():
        left.plot(frame["epoch"], frame["train_acc"] * 100, label=label)
        right.plot(frame["epoch"], frame["test_acc"] * 100, label=label)
    left.set_title("train")
    right.set_title("test")
    for ax in (left, right):
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    left.set_ylabel("accuracy (%)")
    right.legend(loc="lower right", fontsize="small")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_grad_log(logs: Mapping[str, GradLog], path: PathLike, title: Optional[str] = None) -> Path:
    """Total gradient L2 norm per step, log scale, one panel per run."""
    if not logs:
        raise ValueError("nothing to plot")
    fig, axes = plt.subplots(len(logs), 1, figsize=(10, 2.6 * len(logs)), sharex=True, squeeze=False)
    for ax, (label, log) in zip(axes[:, 0], logs.items()):
        totals = log.totals
        steps = np.arange(len(totals))
        ax.plot(steps, totals, linewidth=0.8)
        if len(totals):
            median = pd.Series(totals).expanding().median()
            ax.plot(steps, median, linestyle="--", linewidth=0.8, color="gray", label="running median")
        ax.set_yscale("log")
        ax.set_ylabel("grad norm")
        ax.set_title(label, fontsize="small")
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("step")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    try:
        fig.savefig(path, format="svg")
    finally:
        plt.close(fig)
    return path
