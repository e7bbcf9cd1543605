"""Run configuration: one TOML file, four sections, flags on top.

    seed = 0
    out = "runs/bnas"

    [data]      where images come from and how many to use
    [search]    SearchConfig fields
    [train]     preset, scheme and network overrides
    [deploy]    timing and packed-inference knobs

Unknown sections and keys are errors. `dump_toml` writes the resolved
config back out; loading that file reproduces the run.
"""
from __future__ import annotations

import math
import tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .search import SearchConfig
from .searchspace import PRECISIONS
from .trainer import PRESETS, SCHEME_ALIASES, SCHEMES, NetworkConfig, TrainScheme, make_scheme, preset

RESOLVED_NAME = "resolved_config.toml"
DATA_SOURCES = ("cifar10", "synthetic")
SCHEME_CHOICES = ("standard", "standard-restarts", "minimal", "minimal-longer")


class ConfigError(ValueError):
    """Bad config file, bad value, or flags that contradict each other."""


@dataclass
class DataConfig:
    source: str = "cifar10"
    path: str = "data/cifar-10-batches-bin"
    train_limit: int = 0  # 0 keeps everything
    test_limit: int = 0
    synthetic_size: int = 2000
    synthetic_side: int = 32

    def __post_init__(self) -> None:
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.train_limit < 0 or self.test_limit < 0:
            raise ConfigError("data limits must be >= 0")
        if self.synthetic_size < 2:
            raise ConfigError("data.synthetic_size must be at least 2")


@dataclass
class TrainConfig:
    preset: str = "bnas-mini"
    scheme: str = "minimal"
    epochs: int = 0  # 0 keeps the scheme's own
    batch_size: int = 0
    num_cells: int = 0  # 0 keeps the preset's own
    init_channels: int = 0
    use_skip: bool = True
    precision: str = "binary"
    stem_group_conv: bool = False

    def __post_init__(self) -> None:
        if self.preset.lower() not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if SCHEME_ALIASES.get(self.scheme, self.scheme) not in (*SCHEMES, "minimal_reg_longer"):
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {', '.join(SCHEME_CHOICES)}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"train.precision must be one of {PRECISIONS}, got {self.precision!r}")
        for name in ("epochs", "batch_size", "num_cells", "init_channels"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")

    def network(self, num_classes: int = 10, image_side: int = 32) -> NetworkConfig:
        base = preset(self.preset)
        try:
            return replace(
                base,
                num_cells=self.num_cells or base.num_cells,
                init_channels=self.init_channels or base.init_channels,
                use_skip=self.use_skip,
                precision=self.precision,
                stem_group_conv=self.stem_group_conv,
                num_classes=num_classes,
                image_side=image_side,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def train_scheme(self) -> TrainScheme:
        return make_scheme(self.scheme, self.epochs or None, self.batch_size or None)


@dataclass
class DeployConfig:
    repeats: int = 3
    native_popcount: bool = True
    bench_samples: int = 256
    timing_batch: int = 32

    def __post_init__(self) -> None:
        if self.repeats < 1:
            raise ConfigError("deploy.repeats must be >= 1")
        if self.bench_samples < 1 or self.timing_batch < 1:
            raise ConfigError("deploy.bench_samples and deploy.timing_batch must be >= 1")


SECTIONS = {"data": DataConfig, "search": SearchConfig, "train": TrainConfig, "deploy": DeployConfig}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/bnas"
    data: DataConfig = field(default_factory=DataConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    deploy: DeployConfig = field(default_factory=DeployConfig)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def with_overrides(
        self,
        seed: Optional[int] = None,
        preset_name: Optional[str] = None,
        gamma: Optional[float] = None,
        scheme: Optional[str] = None,
        out: Optional[str] = None,
    ) -> "RunConfig":
        """Apply command-line flags; None leaves a value alone."""
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, search=_section(SearchConfig, {**_plain(cfg.search), "seed": seed}, "search"))
        if preset_name is not None:
            cfg = replace(cfg, train=_section(TrainConfig, {**asdict(cfg.train), "preset": preset_name}, "train"))
        if scheme is not None:
            cfg = replace(cfg, train=_section(TrainConfig, {**asdict(cfg.train), "scheme": scheme}, "train"))
        if gamma is not None:
            cfg = replace(cfg, search=_section(SearchConfig, {**_plain(cfg.search), "gamma": gamma}, "search"))
        if out is not None:
            cfg = replace(cfg, out=out)
        return cfg


def _plain(search: SearchConfig) -> Dict[str, Any]:
    out = asdict(search)
    out["ops"] = list(out["ops"])
    return out


def _section(cls, values: Dict[str, Any], name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from None


def from_dict(payload: Dict[str, Any]) -> RunConfig:
    payload = dict(payload)
    top = {"seed", "out"}
    unknown = sorted(set(payload) - top - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) or key(s): {', '.join(unknown)}")
    seed = payload.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    sections = {}
    for name, cls in SECTIONS.items():
        values = payload.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        if name == "search":
            values = {"seed": seed, **values}
            if values.get("gamma") == "inf":
                values["gamma"] = math.inf
        sections[name] = _section(cls, values, name)
    return RunConfig(seed=seed, out=str(payload.get("out", "runs/bnas")), **sections)


def load_config(path: Union[str, Path, None]) -> RunConfig:
    """Defaults when `path` is None, else the file's values over the defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            payload = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(payload)


# --- writing ---------------------------------------------------------------------


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isinf(value) and value > 0:
            return '"inf"'
        if not math.isfinite(value):
            raise ConfigError(f"cannot write {value!r} to a config file")
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot write {type(value).__name__} to a config file")


def to_dict(cfg: RunConfig) -> Dict[str, Any]:
    return {
        "seed": cfg.seed,
        "out": cfg.out,
        "data": asdict(cfg.data),
        "search": {k: v for k, v in _plain(cfg.search).items() if k != "seed" or v != cfg.seed},
        "train": asdict(cfg.train),
        "deploy": asdict(cfg.deploy),
    }


def dump_toml(cfg: RunConfig) -> str:
    payload = to_dict(cfg)
    lines = [f"seed = {_toml_value(payload['seed'])}", f"out = {_toml_value(payload['out'])}"]
    for name in SECTIONS:
        lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{key} = {_toml_value(value)}" for key, value in payload[name].items())
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, directory: Union[str, Path, None] = None) -> Path:
    """Snapshot next to the run's outputs."""
    target = Path(directory) if directory is not None else cfg.out_dir
    target.mkdir(parents=True, exist_ok=True)
    path = target / RESOLVED_NAME
    path.write_text(dump_toml(cfg), encoding="utf-8")
    return path
