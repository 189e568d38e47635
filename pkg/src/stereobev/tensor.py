"""Reverse-mode autodiff over numpy arrays.

Each operation records its parents and a vector-Jacobian product; backward()
on a scalar walks the graph once in reverse topological order. The operator
set is exactly what the stereo/BEV networks and losses need, nothing more.
Data is float64 by default (float32 is kept when supplied).
"""

from __future__ import annotations

import warnings
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DisconnectedGraphWarning,
    DoubleBackwardError,
    NotScalarError,
    ShapeMismatchError,
)

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_back_done", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple["Tensor", ...] = ()
        self._vjp: Optional[Callable] = None
        self._back_done = False
        self.name = name

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return self.data.item()

    def __float__(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph engine --------------------------------------------------------

    def backward(self) -> None:
        """Populate gradients of every tensor this scalar depends on."""
        if self.data.size != 1:
            raise NotScalarError(f"backward() needs a scalar, got shape {self.shape}")
        if self._back_done:
            raise DoubleBackwardError("backward() already ran on this tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        if not any(n.requires_grad and not n._parents for n in topo):
            warnings.warn(
                "loss is not connected to any trainable tensor",
                DisconnectedGraphWarning,
                stacklevel=2,
            )
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, grad in zip(node._parents, node._vjp(node.grad)):
                if grad is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(grad, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += grad
        self._back_done = True

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    # -- elementwise / shape helpers as methods -------------------------------

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def abs(self):
        return absolute(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), vjp)


def power(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)
    c = float(exponent)
    if c == 0.0:
        return _make(np.ones_like(x.data), (x,), lambda g: (np.zeros_like(x.data),))
    data = x.data**c
    return _make(data, (x,), lambda g: (g * c * x.data ** (c - 1.0),))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)
    return _make(data, (x,), lambda g: (g * data,))


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = _stable_sigmoid(x.data)
    return _make(data, (x,), lambda g: (g * data * (1.0 - data),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


# -- reductions ----------------------------------------------------------------


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, x.shape).astype(x.dtype),)

    return _make(data, (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return tensor_sum(x, axis) / n


# -- shape ops -------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape)
    return _make(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeMismatchError(
                f"concat shapes incompatible on axis {axis}: "
                f"{[t.shape for t in tensors]}"
            )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for start, stop in zip(offsets[:-1], offsets[1:]):
            slicer[axis] = slice(start, stop)
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _make(data, tensors, vjp)


def dropout(x: Tensor, p: float, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: identity in eval mode, mask/(1-p) scaling in train mode."""
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng for determinism")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask))
