"""Optimizers, learning-rate schedules and the checkpoint format.

Schedules are indexed by epoch, 0-based: ``lr_at(s, 0)`` is the rate for the
first epoch and ``lr_at(s, total_epochs - 1)`` the last.

* cosine: lr_min + (lr_max - lr_min) * (1 + cos(pi * e / E)) / 2
* cosine-warm-restarts: the same curve over each `cycle_length` epochs
* one-cycle: linear warm-up from lr_min to lr_max over the first 30% of
  epochs, then cosine decay back to lr_min

Checkpoint layout, all integers little-endian:

    b"BNASCKPT" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u32 rank | rank x u32 extent | f32 data )
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import Tensor

SCHEDULE_KINDS = ("cosine", "cosine-warm-restarts", "one-cycle")
ONE_CYCLE_WARMUP = 0.3

CKPT_MAGIC = b"BNASCKPT"
CKPT_VERSION = 1


class Diverged(RuntimeError):
    """A search or training loss went non-finite. `snapshot` says where."""

    def __init__(self, message: str, snapshot: Dict[str, object]) -> None:
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class OptimizerState:
    kind: str
    params: List[Tensor]
    lr: float
    momentum: float = 0.9
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 0
    first: List[np.ndarray] = field(default_factory=list)
    second: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if not self.first:
            self.first = [np.zeros_like(p.data) for p in self.params]
        if self.kind == "adam" and not self.second:
            self.second = [np.zeros_like(p.data) for p in self.params]


def sgd(params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState("sgd", list(params), lr, momentum=momentum, weight_decay=weight_decay)


def adam(
    params: Sequence[Tensor],
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> OptimizerState:
    return OptimizerState("adam", list(params), lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)


def zero_grad(opt: OptimizerState) -> None:
    for p in opt.params:
        p.grad = None


def step(opt: OptimizerState) -> None:
    """One update from the current `.grad` values. Params without a grad count as zero grad."""
    opt.steps += 1
    for i, p in enumerate(opt.params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if opt.weight_decay:
            g = g + opt.weight_decay * p.data
        if opt.kind == "sgd":
            opt.first[i] = opt.momentum * opt.first[i] + g
            p.data = p.data - opt.lr * opt.first[i]
        else:
            b1, b2 = opt.betas
            opt.first[i] = b1 * opt.first[i] + (1 - b1) * g
            opt.second[i] = b2 * opt.second[i] + (1 - b2) * g * g
            m_hat = opt.first[i] / (1 - b1**opt.steps)
            v_hat = opt.second[i] / (1 - b2**opt.steps)
            p.data = (p.data - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)).astype(p.data.dtype)


def grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale grads so their global L2 norm is at most `max_norm`. Returns the norm before clipping."""
    total = grad_norm(params)
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass(frozen=True)
class LrSchedule:
    kind: str
    lr_max: float
    lr_min: float
    total_epochs: int
    cycle_length: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {', '.join(SCHEDULE_KINDS)}")
        if self.total_epochs < 1:
            raise ValueError("a schedule needs at least one epoch")
        if self.lr_min < 0 or self.lr_max < self.lr_min:
            raise ValueError(f"need 0 <= lr_min <= lr_max, got {self.lr_min} and {self.lr_max}")
        if self.kind == "cosine-warm-restarts" and (self.cycle_length is None or self.cycle_length < 1):
            raise ValueError("cosine-warm-restarts needs a positive cycle_length")


def _cosine(lr_max: float, lr_min: float, progress: float) -> float:
    return lr_min + (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress)) / 2.0


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate for `epoch` (0-based)."""
    s = schedule
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {s.total_epochs} epochs")
    if s.kind == "cosine":
        return _cosine(s.lr_max, s.lr_min, epoch / s.total_epochs)
    if s.kind == "cosine-warm-restarts":
        return _cosine(s.lr_max, s.lr_min, (epoch % s.cycle_length) / s.cycle_length)
    warm = round(ONE_CYCLE_WARMUP * s.total_epochs)
    if epoch < warm:
        return s.lr_min + (s.lr_max - s.lr_min) * epoch / warm
    return _cosine(s.lr_max, s.lr_min, (epoch - warm) / max(s.total_epochs - warm, 1))


def schedule_values(schedule: LrSchedule) -> List[float]:
    return [lr_at(schedule, e) for e in range(schedule.total_epochs)]


def save_checkpoint(path: Union[str, Path], state: Mapping[str, np.ndarray]) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, array in state.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(array, dtype="<f4")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, what: str) -> None:
        self.blob = blob
        self.pos = 0
        self.what = what

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.blob):
            raise ValueError(f"truncated {self.what} at byte offset {self.pos}")
        chunk = self.blob[self.pos : self.pos + size]
        self.pos += size
        return chunk

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.blob)

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def array(self, dtype: str, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize), dtype=dtype).reshape(shape)


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    reader = _Reader(Path(path).read_bytes(), "checkpoint")
    if reader.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ValueError(f"{path} is not a bnas checkpoint")
    version = reader.u32()
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    state: Dict[str, np.ndarray] = {}
    while not reader.exhausted:
        name = reader.text()
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        state[name] = reader.array("<f4", shape).astype(np.float32)
    return state
