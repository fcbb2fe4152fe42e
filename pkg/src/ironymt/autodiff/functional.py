"""Composite and nn-style operations built on the tensor core."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DimensionError, LabelError
from .rng import RngStream
from .tensor import (Tensor, add, as_tensor, hadamard, make_result, mul, relu, sigmoid,
                     tanh, gelu)

_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "hadamard": hadamard,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "gelu": gelu,
}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``mul``, ``sigmoid``, ...)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*inputs)


def activation(name: str):
    if name not in ("gelu", "tanh", "relu"):
        raise ConfigError(f"unsupported activation {name!r}")
    return _ELEMENTWISE[name]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is ``(N, K)``; ``labels`` holds ``N`` integer class indices.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    n, k = logits.shape
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(labels[i])} at index {i} outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def fn(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return make_result(np.asarray(loss), (logits,), fn, "cross_entropy")


def dropout(x: Tensor, rate: float, training: bool, rng: RngStream | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` during training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an RngStream")
    keep = rng.uniform(x.shape) >= rate
    return mul(x, Tensor(keep / (1.0 - rate)))


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DimensionError(f"embedding: ids must lie in [0, {vocab}), got range [{ids.min()}, {ids.max()}]")
    shape = weight.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return make_result(weight.data[ids], (weight,), fn, "embedding")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    centered = d - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(d.ndim - 1))

    def fn(g):
        gx = g * gd
        dx = inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gain, bias), fn, "layer_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out if bias is None else add(out, bias)


def constant(data) -> Tensor:
    return as_tensor(np.asarray(data, dtype=np.float64))
