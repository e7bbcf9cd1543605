"""Module base class and the float layers everything else is built from.

A Module finds its parameters and buffers by walking its attributes: trainable
Tensors are parameters, numpy arrays are buffers (batch norm running
statistics), and Modules or lists of Modules are children. Names are dotted
attribute paths, which is also the checkpoint key format.
"""
from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Module:
    training = True

    def forward(self, *args):
        raise NotImplementedError

    def __call__(self, *args):
        return self.forward(*args)

    def _slots(self, prefix: str = "") -> Iterator[Tuple["Module", str, str, object]]:
        for attr, value in vars(self).items():
            name = prefix + attr
            if isinstance(value, Module):
                yield from value._slots(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._slots(f"{name}.{i}.")
            else:
                yield self, attr, name, value

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for _, _, name, value in self._slots():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for _, _, name, value in self._slots():
            if isinstance(value, np.ndarray):
                yield name, value

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            children = value if isinstance(value, (list, tuple)) else (value,)
            for child in children:
                if isinstance(child, Module):
                    yield from child.modules()

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for attr, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{attr}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{attr}.{i}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state: Dict[str, np.ndarray] = {}
        for _, _, name, value in self._slots():
            if isinstance(value, Tensor) and value.requires_grad:
                state[name] = value.data.copy()
            elif isinstance(value, np.ndarray):
                state[name] = value.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into matching slots. Missing or misshapen keys are errors."""
        seen = set()
        for _, _, name, value in self._slots():
            if isinstance(value, Tensor) and value.requires_grad:
                target = value.data
            elif isinstance(value, np.ndarray):
                target = value
            else:
                continue
            if name not in state:
                raise ValueError(f"state is missing {name!r}")
            array = np.asarray(state[name])
            if array.shape != target.shape:
                raise ValueError(f"{name}: expected shape {target.shape}, got {array.shape}")
            if isinstance(value, Tensor):
                value.data = array.astype(target.dtype, copy=True)
            else:
                target[...] = array
            seen.add(name)
        extra = sorted(set(state) - seen)
        if extra:
            raise ValueError(f"state has unknown entries: {', '.join(extra)}")


def kaiming_normal(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    std = np.sqrt(2.0 / max(fan_in, 1))
    return (rng.standard_normal(shape) * std).astype(get_default_dtype())


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = False,
    ) -> None:
        if in_channels % groups or out_channels % groups:
            raise ValueError(f"{in_channels}->{out_channels} channels do not split into {groups} groups")
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        fan_in = shape[1] * kernel_size * kernel_size
        self.weight = Tensor(kaiming_normal(shape, fan_in, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, affine: bool = True, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS) -> None:
        dtype = get_default_dtype()
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.weight = Tensor(np.ones(channels), requires_grad=True) if affine else None
        self.bias = Tensor(np.zeros(channels), requires_grad=True) if affine else None
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x,
            self.running_mean,
            self.running_var,
            self.weight,
            self.bias,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_features, in_features)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, out_features), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.relu()


class Sequential(Module):
    def __init__(self, *layers: Module) -> None:
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def __getitem__(self, index: int) -> Module:
        return self.layers[index]

    def __len__(self) -> int:
        return len(self.layers)
