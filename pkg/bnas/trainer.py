"""Final networks built from a genotype, and the training schemes.

Presets follow the variant table: cells / initial channels / γ.

    bnas-mini  10 / 24 / 1      bnas-d  12 /  64 / 3
    bnas-a     20 / 36 / 1      bnas-e  12 /  68 / 3
    bnas-b     12 / 64 / 1      bnas-f  15 /  68 / 3
    bnas-c     16 / 108 / 1     bnas-g  11 /  74 / 3
                                bnas-h  16 / 128 / 3

Schemes:

    standard            SGD 0.9, wd 3e-6, one-cycle 5e-2 -> 4e-4, 600 epochs, batch 256
    standard_restarts   SGD 0.9, wd 3e-5, warm restarts every 50 epochs, 0.1 -> 0, 250 epochs, batch 512
    minimal_reg         Adam, no wd, cosine 2e-3 -> 0, no color jitter, 250 epochs, batch 256
    minimal_reg_longer  minimal_reg with the epochs doubled
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .cells import (
    STEM_GROUPS,
    STEM_MULTIPLIER,
    Classifier,
    DiscreteCell,
    Genotype,
    Stem,
    output_channels,
    plan_cells,
)
from .data import Dataset, as_batch, batches
from .layers import Module
from .optim import (
    Diverged,
    LrSchedule,
    adam,
    clip_grad_norm,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sgd,
    step,
    zero_grad,
)
from .searchspace import PRECISIONS
from .tensor import NonFiniteError, Tensor, cross_entropy, no_grad

OVERFIT_GAP = 0.10
GRADLOG_MAGIC = b"BNASGRAD"
GRADLOG_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    name: str = "custom"
    num_cells: int = 10
    init_channels: int = 24
    gamma: float = 1.0
    stem_group_conv: bool = False
    num_classes: int = 10
    use_skip: bool = True
    precision: str = "binary"
    image_side: int = 32

    def __post_init__(self) -> None:
        if self.num_cells < 3:
            raise ValueError(f"a network needs at least 3 cells (two reductions), got {self.num_cells}")
        if self.init_channels < 2 or self.init_channels % 2:
            raise ValueError(f"init_channels must be a positive even number, got {self.init_channels}")
        if self.stem_group_conv and (STEM_MULTIPLIER * self.init_channels) % STEM_GROUPS:
            raise ValueError(
                f"grouped stem needs init_channels divisible by {STEM_GROUPS}, got {self.init_channels}"
            )
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.image_side % 4:
            raise ValueError(f"image side must survive two halvings, got {self.image_side}")

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["gamma"] == float("inf"):
            out["gamma"] = None
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ValueError(f"unknown network fields: {', '.join(unknown)}")
        payload = dict(payload)
        if payload.get("gamma", 1.0) is None:
            payload["gamma"] = float("inf")
        return cls(**payload)


PRESETS: Dict[str, NetworkConfig] = {
    "bnas-mini": NetworkConfig("BNAS-Mini", 10, 24, 1.0),
    "bnas-a": NetworkConfig("BNAS-A", 20, 36, 1.0),
    "bnas-b": NetworkConfig("BNAS-B", 12, 64, 1.0),
    "bnas-c": NetworkConfig("BNAS-C", 16, 108, 1.0),
    "bnas-d": NetworkConfig("BNAS-D", 12, 64, 3.0),
    "bnas-e": NetworkConfig("BNAS-E", 12, 68, 3.0),
    "bnas-f": NetworkConfig("BNAS-F", 15, 68, 3.0),
    "bnas-g": NetworkConfig("BNAS-G", 11, 74, 3.0),
    "bnas-h": NetworkConfig("BNAS-H", 16, 128, 3.0),
}


def preset(name: str) -> NetworkConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


class Network(Module):
    """Float stem, discrete cells, global pool and float classifier."""

    def __init__(self, genotype: Genotype, config: NetworkConfig, rng: np.random.Generator) -> None:
        plan = plan_cells(config.num_cells, config.init_channels, config.image_side)
        self.stem = Stem(STEM_MULTIPLIER * config.init_channels, rng, grouped=config.stem_group_conv)
        self.cells = [
            DiscreteCell(
                genotype,
                p.c_prevprev,
                p.c_prev,
                p.channels,
                p.reduction,
                p.reduction_prev,
                rng,
                use_skip=config.use_skip,
                precision=config.precision,
            )
            for p in plan
        ]
        self.classifier = Classifier(output_channels(plan), config.num_classes, rng)

    def forward(self, x: Tensor) -> Tensor:
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s1, s0)
        return self.classifier(s1)

    def layer_groups(self) -> Dict[str, Module]:
        """Top-level pieces whose gradient norms are logged."""
        groups: Dict[str, Module] = {"stem": self.stem}
        for i, cell in enumerate(self.cells):
            groups[f"cell_{i:02d}"] = cell
        groups["classifier"] = self.classifier
        return groups


def build_network(genotype: Genotype, config: NetworkConfig, seed: int = 0) -> Network:
    return Network(genotype, config, np.random.default_rng(seed))


# --- schemes -------------------------------------------------------------------------

SCHEME_ALIASES = {
    "minimal": "minimal_reg",
    "minimal-longer": "minimal_reg_longer",
    "standard-restarts": "standard_restarts",
}


@dataclass(frozen=True)
class TrainScheme:
    kind: str
    epochs: int
    batch_size: int
    optimizer: str
    lr_max: float
    lr_min: float
    schedule: str
    weight_decay: float
    augmentation: str
    cycle_length: Optional[int] = None
    momentum: float = 0.9
    grad_clip: float = 5.0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def lr_schedule(self) -> LrSchedule:
        cycle = self.cycle_length
        if cycle is not None:
            cycle = min(cycle, self.epochs)
        return LrSchedule(self.schedule, self.lr_max, self.lr_min, self.epochs, cycle)


SCHEMES: Dict[str, TrainScheme] = {
    "standard": TrainScheme("standard", 600, 256, "sgd", 5e-2, 4e-4, "one-cycle", 3e-6, "flip+crop+jitter"),
    "standard_restarts": TrainScheme(
        "standard_restarts", 250, 512, "sgd", 0.1, 0.0, "cosine-warm-restarts", 3e-5, "flip+crop+jitter", cycle_length=50
    ),
    "minimal_reg": TrainScheme("minimal_reg", 250, 256, "adam", 2e-3, 0.0, "cosine", 0.0, "flip+crop"),
}


def make_scheme(kind: str, epochs: Optional[int] = None, batch_size: Optional[int] = None) -> TrainScheme:
    """A named scheme, optionally rescaled to `epochs` (doubled again for the longer variant)."""
    kind = SCHEME_ALIASES.get(kind, kind)
    longer = kind == "minimal_reg_longer"
    base_kind = "minimal_reg" if longer else kind
    if base_kind not in SCHEMES:
        raise ValueError(f"unknown scheme {kind!r}; choose from {', '.join([*SCHEMES, 'minimal_reg_longer'])}")
    scheme = SCHEMES[base_kind]
    if epochs:
        scheme = replace(scheme, epochs=epochs)
    if batch_size:
        scheme = replace(scheme, batch_size=batch_size)
    if longer:
        scheme = replace(scheme, kind=kind, epochs=2 * scheme.epochs)
    return scheme


# --- gradient log ----------------------------------------------------------------------


@dataclass
class GradLog:
    """Per-step gradient L2 norms per layer group, plus the total in the last column."""

    names: List[str]
    rows: List[np.ndarray] = field(default_factory=list)

    def record(self, norms: Sequence[float]) -> None:
        if len(norms) != len(self.names) + 1:
            raise ValueError(f"expected {len(self.names) + 1} norms, got {len(norms)}")
        self.rows.append(np.asarray(norms, dtype=np.float32))

    @property
    def totals(self) -> np.ndarray:
        return np.array([row[-1] for row in self.rows], dtype=np.float64)

    def as_frame(self) -> pd.DataFrame:
        data = np.stack(self.rows) if self.rows else np.zeros((0, len(self.names) + 1), np.float32)
        return pd.DataFrame(data, columns=[*self.names, "total"])

    def write(self, path: Union[str, Path]) -> None:
        chunks = [GRADLOG_MAGIC, struct.pack("<III", GRADLOG_VERSION, len(self.names), len(self.rows))]
        for name in self.names:
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)) + encoded)
        for row in self.rows:
            chunks.append(row.astype("<f4").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def read(cls, path: Union[str, Path]) -> "GradLog":
        blob = Path(path).read_bytes()
        if not blob.startswith(GRADLOG_MAGIC):
            raise ValueError(f"{path} is not a gradient log")
        pos = len(GRADLOG_MAGIC)
        try:
            version, count, steps = struct.unpack_from("<III", blob, pos)
            pos += 12
            if version != GRADLOG_VERSION:
                raise ValueError(f"unsupported gradient log version {version}")
            names = []
            for _ in range(count):
                (size,) = struct.unpack_from("<I", blob, pos)
                names.append(blob[pos + 4 : pos + 4 + size].decode("utf-8"))
                pos += 4 + size
        except struct.error:
            raise ValueError(f"truncated gradient log header in {path}") from None
        width = (count + 1) * 4
        if len(blob) - pos != steps * width:
            raise ValueError(f"truncated gradient log {path}: expected {steps} rows")
        data = np.frombuffer(blob[pos:], dtype="<f4").reshape(steps, count + 1)
        return cls(names, [row.astype(np.float32) for row in data])


def group_grad_norms(net: Network) -> List[float]:
    norms = []
    total = 0.0
    for module in net.layer_groups().values():
        sq = sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in module.parameters() if p.grad is not None)
        norms.append(np.sqrt(sq))
        total += sq
    norms.append(np.sqrt(total))
    return norms


# --- training ---------------------------------------------------------------------------


@dataclass
class CurvePoint:
    epoch: int  # 1-based, epochs completed
    train_acc: float
    test_acc: float
    lr: float
    train_loss: float


@dataclass
class TrainResult:
    network: Network
    curve: List[CurvePoint]
    grad_log: GradLog

    @property
    def final_test_acc(self) -> float:
        return self.curve[-1].test_acc if self.curve else float("nan")

    @property
    def final_train_acc(self) -> float:
        return self.curve[-1].train_acc if self.curve else float("nan")

    @property
    def diagnosis(self) -> str:
        return diagnose_fit(self.curve)

    def curve_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(p) for p in self.curve], columns=[f.name for f in fields(CurvePoint)])


def diagnose_fit(curve: Sequence[CurvePoint]) -> str:
    """underfitting / overfitting / balanced, judged on the tail of the curve."""
    if not curve:
        return "balanced"
    tail = curve[-max(1, len(curve) // 4) :]
    below = sum(p.train_acc < p.test_acc for p in tail)
    if below > len(tail) / 2:
        return "underfitting"
    if curve[-1].train_acc - curve[-1].test_acc > OVERFIT_GAP:
        return "overfitting"
    return "balanced"


def predict(net: Module, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    net.eval()
    out = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = as_batch(dataset, np.arange(start, min(start + batch_size, len(dataset))))
            out.append(net(Tensor(batch.images)).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(net: Module, dataset: Dataset, batch_size: int = 256) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(predict(net, dataset, batch_size) == dataset.labels))


def make_optimizer(net: Module, scheme: TrainScheme):
    if scheme.optimizer == "sgd":
        return sgd(net.parameters(), scheme.lr_max, scheme.momentum, scheme.weight_decay)
    return adam(net.parameters(), scheme.lr_max, weight_decay=scheme.weight_decay)


def train(
    net: Network,
    scheme: TrainScheme,
    train_set: Dataset,
    test_set: Dataset,
    seed: int = 0,
    on_epoch: Optional[Callable[[CurvePoint], None]] = None,
) -> TrainResult:
    opt = make_optimizer(net, scheme)
    schedule = scheme.lr_schedule()
    grad_log = GradLog(list(net.layer_groups()))
    curve: List[CurvePoint] = []
    steps = 0
    for epoch in range(scheme.epochs):
        opt.lr = lr_at(schedule, epoch)
        net.train()
        correct = seen = 0
        loss_sum = 0.0
        for batch in batches(train_set, scheme.batch_size, seed=(seed, epoch), augmentation=scheme.augmentation):
            try:
                zero_grad(opt)
                logits = net(Tensor(batch.images))
                loss = cross_entropy(logits, batch.labels)
                loss.backward(inputs=opt.params)
            except NonFiniteError as e:
                raise Diverged(
                    f"training diverged at epoch {epoch + 1}, step {steps}: {e}",
                    {
                        "phase": "train",
                        "epoch": epoch + 1,
                        "step": steps,
                        "lr": opt.lr,
                        "last_epoch": asdict(curve[-1]) if curve else None,
                        "error": str(e),
                    },
                ) from e
            grad_log.record(group_grad_norms(net))
            clip_grad_norm(opt.params, scheme.grad_clip)
            step(opt)
            steps += 1
            correct += int(np.sum(logits.data.argmax(axis=1) == batch.labels))
            seen += len(batch)
            loss_sum += loss.item() * len(batch)
        point = CurvePoint(
            epoch=epoch + 1,
            train_acc=correct / max(seen, 1),
            test_acc=evaluate(net, test_set),
            lr=opt.lr,
            train_loss=loss_sum / max(seen, 1),
        )
        curve.append(point)
        if on_epoch is not None:
            on_epoch(point)
    return TrainResult(net, curve, grad_log)


# --- persistence -----------------------------------------------------------------------------


def sidecar_path(checkpoint: Union[str, Path]) -> Path:
    return Path(checkpoint).with_suffix(".json")


def save_model(path: Union[str, Path], net: Network, config: NetworkConfig, genotype: Genotype, seed: int = 0) -> None:
    """Weights to `path`, the recipe to rebuild them to the sidecar JSON next to it."""
    save_checkpoint(path, net.state_dict())
    meta = {"network": config.to_dict(), "genotype": genotype.to_dict(), "seed": seed}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def read_model_header(meta: object, source: Union[str, Path]) -> Tuple[NetworkConfig, Genotype, int]:
    """Network config, genotype and seed from a checkpoint sidecar or a deployed header."""
    if not isinstance(meta, dict):
        raise ValueError(f"{source}: model header must be a JSON object")
    missing = [key for key in ("network", "genotype") if key not in meta]
    if missing:
        raise ValueError(f"{source}: model header lacks {', '.join(missing)}")
    seed = meta.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ValueError(f"{source}: seed must be an integer, got {seed!r}")
    try:
        config = NetworkConfig.from_dict(dict(meta["network"]))
    except (TypeError, ValueError) as e:
        raise ValueError(f"{source}: malformed network config: {e}") from None
    return config, Genotype.from_dict(meta["genotype"]), seed


def load_model(path: Union[str, Path]):
    """Return (network, config, genotype) for a checkpoint written by `save_model`."""
    sidecar = sidecar_path(path)
    if not sidecar.is_file():
        raise FileNotFoundError(f"missing {sidecar} next to checkpoint {path}")
    config, genotype, seed = read_model_header(json.loads(sidecar.read_text(encoding="utf-8")), sidecar)
    net = build_network(genotype, config, seed)
    net.load_state_dict(load_checkpoint(path))
    net.eval()
    return net, config, genotype
