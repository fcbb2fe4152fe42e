"""Tensor type and the reverse-mode graph machinery.

Every tensor holds a float64 numpy array. Operations on tensors that require
gradients record a backward closure; :func:`backward` walks the recorded graph
in reverse topological order and accumulates gradients into ``.grad``.

Broadcasting is deliberately narrow: two operands must either have identical
shapes, or the smaller operand's shape must equal the trailing dimensions of
the larger one (the bias-add case, e.g. ``(B, L, H) + (H,)``). Python scalars
are accepted as constants by the arithmetic operators.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (),
                 _backward: BackwardFn | None = None, op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    # -- operator sugar --------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Iterable[Tensor], fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op, recording the graph only when needed."""
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=fn, op=op)
    return Tensor(data, op=op)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires grad and reaches ``loss``.

    Gradients are accumulated additively into any existing ``.grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        # never mutated in place, so aliasing g is safe
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- shape helpers -----------------------------------------------------------

def _bias_shapes(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    small, large = (a, b) if len(a) <= len(b) else (b, a)
    if len(small) == 0 or large[len(large) - len(small):] == small:
        return
    raise DimensionError(f"{op}: shapes {a} and {b} are not broadcast-compatible "
                         "(only trailing-dimension bias broadcasting is supported)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape) if shape else np.asarray(g.sum())


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bias_shapes(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def fn(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return make_result(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bias_shapes(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def fn(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return make_result(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bias_shapes(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), fn, "mul")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors of identical shape."""
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return mul(a, b)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so neither branch overflows
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def fn(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), fn, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def fn(g):
        return (g * (1.0 - out * out),)

    return make_result(out, (x,), fn, "tanh")


def relu(x: Tensor) -> Tensor:
    d = x.data
    out = np.maximum(d, 0.0)

    def fn(g):
        return (g * (d > 0),)

    return make_result(out, (x,), fn, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    d2 = d * d
    inner = _GELU_C * d * (1.0 + 0.044715 * d2)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return make_result(out, (x,), fn, "gelu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def fn(g):
        return (g * out,)

    return make_result(out, (x,), fn, "exp")


def log(x: Tensor) -> Tensor:
    d = x.data

    def fn(g):
        return (g / d,)

    return make_result(np.log(d), (x,), fn, "log")


# -- linear algebra and reductions -------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` may be a 2-D weight ``(k, n)`` applied to the last axis of an ``a`` of
    any rank, or both operands may share identical leading batch dimensions.
    Stacked products go through numpy's per-matrix loop, so each example's
    result is independent of how many examples are stacked with it.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim < 2:
        raise DimensionError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {ad.shape} and {bd.shape}")
    if bd.ndim == 2:
        out = ad @ bd
        k, n = bd.shape

        def fn(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, k).T @ g2
            return ga, gb
    else:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise DimensionError(f"matmul: batch dimensions differ for shapes {ad.shape} and {bd.shape}")
        out = ad @ bd

        def fn(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_result(out, (a, b), fn, "matmul")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    d = x.data
    out = d.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, d.shape).copy(),)

    return make_result(out, (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def fn(g):
        return (g.reshape(old),)

    return make_result(x.data.reshape(shape), (x,), fn, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def fn(g):
        return (np.transpose(g, inverse),)

    return make_result(np.transpose(x.data, axes), (x,), fn, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise TypeError("index a tensor with integers, slices or integer arrays")
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return make_result(x.data[index], (x,), fn, "getitem")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), fn, "log_softmax")
