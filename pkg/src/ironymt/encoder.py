"""Bidirectional transformer encoder (post-norm, learned absolute positions).

Each layer is::

    x = LayerNorm(x + Dropout(MultiHeadAttention(x)))
    x = LayerNorm(x + Dropout(FFN(x)))

with ``FFN(x) = act(x W_in + b_in) W_out + b_out``. The pooled vector is
``tanh(h_CLS W_p + b_p)``.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``emb.token``, ``layer0.attn.q.W``, ``pooler.b`` ...).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import (RngStream, Tensor, activation, dropout, embedding, layer_norm, matmul,
                       softmax, tanh, transpose)
from .errors import ConfigError, ContractError, DimensionError
from .tokenization import EncodedBatch, TokenSequence

EncoderParams = dict[str, Tensor]

PRESETS = {
    "desk": dict(layers=4, hidden=128, heads=4, ffn_inner=512),
    "paper-full": dict(layers=12, hidden=768, heads=12, ffn_inner=3072),
}
MASK_BIAS = -1e9


@dataclass
class EncoderConfig:
    layers: int
    hidden: int
    heads: int
    ffn_inner: int
    vocab_size: int
    max_len: int = 50
    dropout: float = 0.1
    activation: str = "gelu"
    head_input: str = "pooled"
    type_vocab: int = 2
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.layers < 0:
            raise ConfigError(f"layers must be non-negative, got {self.layers}")
        for name in ("hidden", "heads", "ffn_inner", "vocab_size", "max_len", "type_vocab"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"EncoderConfig.{name} must be positive, got {getattr(self, name)}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.head_input not in ("pooled", "cls"):
            raise ConfigError(f"head_input must be 'pooled' or 'cls', got {self.head_input!r}")
        activation(self.activation)

    @classmethod
    def preset(cls, name: str, vocab_size: int, **overrides) -> "EncoderConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown encoder preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(vocab_size=vocab_size, **{**PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    h, f = config.hidden, config.ffn_inner
    shapes = {
        "emb.token": (config.vocab_size, h),
        "emb.position": (config.max_len, h),
        "emb.segment": (config.type_vocab, h),
    }
    for i in range(config.layers):
        p = f"layer{i}"
        for proj in "qkvo":
            shapes[f"{p}.attn.{proj}.W"] = (h, h)
            shapes[f"{p}.attn.{proj}.b"] = (h,)
        shapes[f"{p}.ln1.gain"] = (h,)
        shapes[f"{p}.ln1.bias"] = (h,)
        shapes[f"{p}.ffn.in.W"] = (h, f)
        shapes[f"{p}.ffn.in.b"] = (f,)
        shapes[f"{p}.ffn.out.W"] = (f, h)
        shapes[f"{p}.ffn.out.b"] = (h,)
        shapes[f"{p}.ln2.gain"] = (h,)
        shapes[f"{p}.ln2.bias"] = (h,)
    shapes["pooler.W"] = (h, h)
    shapes["pooler.b"] = (h,)
    return shapes


def init_encoder_params(config: EncoderConfig, rng: RngStream) -> EncoderParams:
    """Matrices from N(0, init_std^2), biases 0, layer-norm gains 1."""
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.normal(shape, config.init_std)
        params[name] = Tensor(data, True)
    return params


def check_params(params: EncoderParams, config: EncoderConfig) -> None:
    for name, shape in parameter_shapes(config).items():
        if name not in params:
            raise ConfigError(f"encoder parameter {name!r} missing")
        if params[name].shape != shape:
            raise DimensionError(f"encoder parameter {name!r} has shape {params[name].shape}, expected {shape}")


def rowwise_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply ``x @ W + b`` to ``(B, H)`` rows one example at a time.

    Routing through a stacked ``(B, 1, H)`` product keeps each row's result
    bitwise independent of the batch it sits in.
    """
    n = x.shape[0]
    out = matmul(x.reshape(n, 1, x.shape[1]), weight)
    if bias is not None:
        out = out + bias
    return out.reshape(n, weight.shape[1])


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, return_weights: bool = False):
    """``softmax(q k^T / sqrt(d) + bias) v`` over the last two axes.

    ``mask`` marks valid key positions with 1 and PAD with 0; it must broadcast
    against the key axis (shape ``(..., L_k)``). PAD columns receive a -1e9 bias.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1] or q.shape[:-2] != k.shape[:-2]:
        raise DimensionError(f"attention: incompatible shapes q {q.shape}, k {k.shape}, v {v.shape}")
    d = q.shape[-1]
    axes = list(range(k.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = matmul(q, transpose(k, axes)) * (1.0 / math.sqrt(d))
    if mask is not None:
        m = np.asarray(mask)
        if m.shape[-1] != k.shape[-2]:
            raise DimensionError(f"attention: mask {m.shape} does not cover {k.shape[-2]} key positions")
        bias = np.where(m == 0, MASK_BIAS, 0.0)
        scores = scores + Tensor(np.broadcast_to(bias, scores.shape).copy())
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, h = x.shape
    return transpose(x.reshape(b, n, heads, h // heads), (0, 2, 1, 3))


def multi_head_attention(x: Tensor, params: EncoderParams, prefix: str, heads: int,
                         mask=None) -> Tensor:
    """Self-attention over ``x`` of shape ``(B, L, H)``; output has the same shape.

    ``mask`` is the ``(B, L)`` attention mask (1 = real token).
    """
    if x.ndim != 3:
        raise DimensionError(f"multi_head_attention expects (B, L, H), got {x.shape}")
    b, n, h = x.shape
    if h % heads:
        raise ConfigError(f"hidden {h} is not divisible by heads {heads}")

    def proj(name):
        return matmul(x, params[f"{prefix}.{name}.W"]) + params[f"{prefix}.{name}.b"]

    q, k, v = (_split_heads(proj(p), heads) for p in "qkv")
    m = None if mask is None else np.asarray(mask)[:, None, None, :]
    ctx = scaled_dot_attention(q, k, v, m)
    ctx = transpose(ctx, (0, 2, 1, 3)).reshape(b, n, h)
    return matmul(ctx, params[f"{prefix}.o.W"]) + params[f"{prefix}.o.b"]


def feed_forward(x: Tensor, params: EncoderParams, prefix: str, act: str = "gelu") -> Tensor:
    inner = activation(act)(matmul(x, params[f"{prefix}.in.W"]) + params[f"{prefix}.in.b"])
    return matmul(inner, params[f"{prefix}.out.W"]) + params[f"{prefix}.out.b"]


def embed(batch: EncodedBatch, params: EncoderParams) -> Tensor:
    n = batch.ids.shape[1]
    x = embedding(params["emb.token"], batch.ids) + params["emb.position"][:n]
    return x + embedding(params["emb.segment"], batch.segment_ids)


def as_batch(seq) -> EncodedBatch:
    if isinstance(seq, EncodedBatch):
        return seq
    if isinstance(seq, TokenSequence):
        return EncodedBatch.stack([seq])
    return EncodedBatch.stack(list(seq))


def encoder_forward(seq, params: EncoderParams, config: EncoderConfig, training: bool = False,
                    rng: RngStream | None = None) -> tuple[Tensor, Tensor]:
    """Return per-position hidden states ``(B, L, H)`` and pooled CLS vectors ``(B, H)``."""
    batch = as_batch(seq)
    if batch.ids.ndim != 2 or batch.ids.shape[0] == 0:
        raise ContractError("encoder_forward needs a non-empty batch of sequences")
    if batch.ids.shape[1] > config.max_len:
        raise ContractError(f"sequence length {batch.ids.shape[1]} exceeds max_len {config.max_len}; "
                            "truncate with encode() first")
    mask = batch.attention_mask
    x = embed(batch, params)
    for i in range(config.layers):
        p = f"layer{i}"
        a = multi_head_attention(x, params, f"{p}.attn", config.heads, mask)
        a = dropout(a, config.dropout, training, rng)
        x = layer_norm(x + a, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"], config.layer_norm_eps)
        f = feed_forward(x, params, f"{p}.ffn", config.activation)
        f = dropout(f, config.dropout, training, rng)
        x = layer_norm(x + f, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"], config.layer_norm_eps)
    b, _, h = x.shape
    cls = x[:, 0:1, :]
    pooled = tanh(matmul(cls, params["pooler.W"]) + params["pooler.b"]).reshape(b, h)
    return x, pooled


def head_features(hidden: Tensor, pooled: Tensor, config: EncoderConfig) -> Tensor:
    """The vector classification heads consume (pooled, or the raw CLS state)."""
    if config.head_input == "pooled":
        return pooled
    return hidden[:, 0, :]
