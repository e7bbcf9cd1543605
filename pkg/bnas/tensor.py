"""Dense tensors with reverse-mode automatic differentiation.

Every op that sees an input with ``requires_grad`` records itself: the output
keeps its parents and a closure that maps the output gradient to one gradient
per parent. ``Tensor.backward`` walks that graph once, in reverse topological
order, and accumulates into the leaves.

Conventions:

* Values are float32 unless a ``default_dtype`` block says otherwise. The
  finite-difference tests run under float64 so the check measures the
  derivative and not the rounding.
* A forward op that produces NaN or Inf raises ``NonFiniteError`` at the op,
  so a diverging run stops where it diverged instead of poisoning the weights.
* Leaf gradients accumulate across backward calls. Optimizers zero them.
* First-order only: backward closures work on plain arrays and never build a
  second graph.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True
_node_ids = itertools.count()

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from its inputs."""


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Create new tensors as `dtype` inside the block."""
    global _DTYPE
    previous, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them. Used for evaluation and bookkeeping."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional float array that can take part in the gradient tape."""

    # makes `ndarray + Tensor` dispatch to Tensor.__radd__
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Backward] = None
        self._op = "leaf"
        self._id = next(_node_ids)

    # --- introspection ----------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, off the tape."""
        return Tensor(self.data, dtype=self.data.dtype)

    # --- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def abs(self) -> "Tensor":
        return abs_(self)

    def relu(self) -> "Tensor":
        return relu(self)

    # --- backward -----------------------------------------------------------

    def backward(self, inputs: Optional[Iterable["Tensor"]] = None) -> None:
        """Fill `.grad` on every leaf that this scalar depends on.

        Leaves in `inputs` that the loss does not depend on get a zero gradient.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is not on the tape: nothing it depends on requires grad")

        pending = {self._id: np.ones_like(self.data)}
        for node in reversed(topological_order(self)):
            g = pending.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{node._op} produced a gradient of shape {pg.shape} "
                        f"for an input of shape {parent.shape}"
                    )
                if parent._id in pending:
                    pending[parent._id] = pending[parent._id] + pg
                else:
                    pending[parent._id] = pg
        for leaf in inputs or ():
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from `root` on the tape, every input before its users.

    Iterative, because a 20-cell network is deeper than the recursion limit.
    """
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent._id not in seen:
                stack.append((parent, False))
    return order


def apply_op(op: str, data: np.ndarray, parents: Tuple[Tensor, ...], backward: Backward) -> Tensor:
    """Wrap an op result, recording it when any parent is on the tape."""
    data = np.asarray(data)
    if parents:
        data = data.astype(parents[0].data.dtype, copy=False)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")

    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._id = next(_node_ids)
    record = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = record
    out._parents = parents if record else ()
    out._backward = backward if record else None
    return out


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.data.dtype if like is not None else None)


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand(grad: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


# --- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return apply_op("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return apply_op("div", a.data / b.data, (a, b), backward)


def power(x: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return apply_op("power", x.data**exponent, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return apply_op("exp", out, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return apply_op("log", out, (x,), backward)


def abs_(x: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(x.data),)

    return apply_op("abs", np.abs(x.data), (x,), backward)


def relu(x: Tensor) -> Tensor:
    def backward(g):
        return (g * (x.data > 0),)

    return apply_op("relu", np.maximum(x.data, 0), (x,), backward)


# --- shape and reductions -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return apply_op("matmul", a.data @ b.data, (a, b), backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        return (_expand(g, x.shape, axis, keepdims),)

    return apply_op("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.size(out), 1)

    def backward(g):
        return (_expand(g, x.shape, axis, keepdims) / count,)

    return apply_op("mean", out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return apply_op("reshape", x.data.reshape(shape), (x,), backward)


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return apply_op("getitem", x.data[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join along `axis` (the channel axis by default)."""
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    parts = tuple(tensors)
    sizes = [t.shape[axis] for t in parts]
    try:
        data = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as e:
        raise ValueError(f"concat shape mismatch: {[t.shape for t in parts]}") from e

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return apply_op("concat", data, parts, backward)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


# --- softmax and loss ---------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return apply_op("log_softmax", out, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under `logits` (N, C)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(
            f"cross_entropy expects logits (N, C) and N labels, got {logits.shape} and {labels.shape}"
        )
    n, classes = logits.shape
    if n == 0:
        raise ValueError("cross_entropy of an empty batch")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return apply_op("cross_entropy", np.asarray(loss), (logits,), backward)
