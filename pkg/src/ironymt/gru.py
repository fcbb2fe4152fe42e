"""One-layer unidirectional GRU classifier.

The cell has no bias terms::

    z  = sigmoid(x W_z + h_prev U_z)
    r  = sigmoid(x W_r + h_prev U_r)
    h~ = tanh(x W + r * (h_prev U))
    h  = (1 - z) * h_prev + z * h~

Weights use the row-vector convention (``x @ W``), so ``W_z`` has shape
``(embedding_dim, hidden)`` and ``U_z`` has shape ``(hidden, hidden)``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .autodiff import (AdamState, RngStream, Tensor, adam_step, backward, cross_entropy, dropout,
                       embedding, hadamard, sigmoid, softmax, tanh)
from .checkpoint import ModelCheckpoint
from .data import Example
from .errors import ConfigError, DataError, DimensionError
from .metrics import SELECTIONS, MetricsRecord, evaluate, select_best
from .tokenization import EncodedBatch, TokenSequence, Vocabulary, encode_batch

log = logging.getLogger(__name__)

GATE_NAMES = ("W_z", "U_z", "W_r", "U_r", "W", "U")


@dataclass
class GruConfig:
    hidden: int = 500
    max_len: int = 50
    vocab_size: int = 22_000
    embedding_dim: int = 128
    lr: float = 1e-3
    dropout: float = 0.5
    batch: int = 64
    epochs: int = 20
    num_classes: int = 2

    def __post_init__(self):
        for f in fields(self):
            if f.name != "dropout" and getattr(self, f.name) <= 0:
                raise ConfigError(f"GruConfig.{f.name} must be positive, got {getattr(self, f.name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"GruConfig.dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GruConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass
class GruParams:
    embedding: Tensor
    W_z: Tensor
    U_z: Tensor
    W_r: Tensor
    U_r: Tensor
    W: Tensor
    U: Tensor
    output_W: Tensor
    output_b: Tensor

    def __post_init__(self):
        hidden = self.U.shape[0]
        emb = self.embedding.shape[1]
        for name in GATE_NAMES:
            t = getattr(self, name)
            want = (emb, hidden) if name.startswith("W") else (hidden, hidden)
            if t.shape != want:
                raise DimensionError(f"GRU parameter {name} has shape {t.shape}, expected {want}")

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> "GruParams":
        return cls(**{f.name: Tensor(np.array(arrays[f.name]), requires_grad) for f in fields(cls)})


def init_gru_params(config: GruConfig, vocab_rows: int, rng: RngStream) -> GruParams:
    """Embeddings from N(0, 1); gate and head weights uniform in +-1/sqrt(hidden)."""
    h, d = config.hidden, config.embedding_dim
    bound = 1.0 / np.sqrt(h)

    def uni(shape):
        return Tensor(rng.uniform(shape, -bound, bound), True)

    return GruParams(
        embedding=Tensor(rng.normal((vocab_rows, d)), True),
        W_z=uni((d, h)), U_z=uni((h, h)),
        W_r=uni((d, h)), U_r=uni((h, h)),
        W=uni((d, h)), U=uni((h, h)),
        output_W=uni((h, config.num_classes)),
        output_b=Tensor(np.zeros(config.num_classes), True),
    )


def blend(z: Tensor, h_prev: Tensor, h_tilde: Tensor) -> Tensor:
    """``(1 - z) * h_prev + z * h_tilde``; exact at the z = 0 and z = 1 endpoints."""
    return hadamard(1.0 - z, h_prev) + hadamard(z, h_tilde)


def gru_cell_step(x_t: Tensor, h_prev: Tensor, params: GruParams) -> Tensor:
    """One recurrence step for a single vector ``(d,)`` or a batch ``(B, d)``."""
    if x_t.shape[-1] != params.W_z.shape[0]:
        raise DimensionError(f"input width {x_t.shape[-1]} does not match W_z {params.W_z.shape}")
    if h_prev.shape[-1] != params.hidden or h_prev.shape[:-1] != x_t.shape[:-1]:
        raise DimensionError(f"h_prev shape {h_prev.shape} incompatible with input {x_t.shape} "
                             f"and hidden size {params.hidden}")
    z = sigmoid(x_t @ params.W_z + h_prev @ params.U_z)
    r = sigmoid(x_t @ params.W_r + h_prev @ params.U_r)
    h_tilde = tanh(x_t @ params.W + hadamard(r, h_prev @ params.U))
    return blend(z, h_prev, h_tilde)


def _as_batch(seq) -> tuple[EncodedBatch, bool]:
    if isinstance(seq, TokenSequence):
        return EncodedBatch.stack([seq]), True
    if isinstance(seq, EncodedBatch):
        return seq, False
    return EncodedBatch.stack(list(seq)), False


def gru_forward(seq, params: GruParams, config: GruConfig, training: bool = False,
                rng: RngStream | None = None) -> Tensor:
    """Logits for one sequence ``(K,)`` or a batch ``(B, K)``.

    The hidden state is read at each example's last non-PAD position; an empty
    sequence yields ``h = 0`` and therefore ``logits = output_b``.
    """
    batch, single = _as_batch(seq)
    ids = batch.ids
    rows = params.embedding.shape[0]
    if ids.size and int(ids.max()) >= rows:
        raise ConfigError(f"token id {int(ids.max())} exceeds the embedding table ({rows} rows); "
                          "was the sequence encoded with a different vocabulary?")
    n, width = ids.shape
    lengths = np.minimum(batch.lengths, width)
    h = Tensor(np.zeros((n, params.hidden)))
    final = Tensor(np.zeros((n, params.hidden)))
    steps = int(lengths.max()) if n else 0
    if steps:
        x = embedding(params.embedding, ids[:, :steps])
        for t in range(steps):
            h = gru_cell_step(x[:, t, :], h, params)
            ends = lengths == t + 1
            if ends.any():
                final = final + hadamard(h, Tensor(np.repeat(ends[:, None], params.hidden, axis=1)
                                                   .astype(np.float64)))
    final = dropout(final, config.dropout, training, rng)
    logits = final @ params.output_W + params.output_b
    return logits[0] if single else logits


def gru_probabilities(batch: EncodedBatch, params: GruParams, config: GruConfig) -> np.ndarray:
    out = []
    for start in range(0, len(batch), config.batch):
        part = batch.take(slice(start, start + config.batch))
        out.append(softmax(gru_forward(part, params, config), axis=-1).data)
    return np.concatenate(out) if out else np.zeros((0, config.num_classes))


def gru_checkpoint(params: GruParams, config: GruConfig, vocab: Vocabulary, meta: dict | None = None,
                   arrays: dict | None = None) -> ModelCheckpoint:
    arrays = arrays if arrays is not None else {k: t.data.copy() for k, t in params.tensors().items()}
    return ModelCheckpoint(kind="gru", config=config.to_dict(), vocab_fingerprint=vocab.fingerprint(),
                           params=arrays, provenance="scratch", meta=dict(meta or {}))


def train_gru(train_set: Sequence[Example], dev_set: Sequence[Example], vocab: Vocabulary,
              config: GruConfig, seed: int, task: str = "irony",
              selection: str = "dev") -> tuple[ModelCheckpoint, list[MetricsRecord]]:
    """Adam at a fixed rate, saving the best dev-macro-F1 epoch (earliest on ties).

    ``selection="last"`` keeps the final epoch instead, for runs whose dev rows
    were folded into training.
    """
    if selection not in SELECTIONS:
        raise ConfigError(f"selection must be one of {SELECTIONS}, got {selection!r}")
    if not train_set:
        raise DataError("GRU training split is empty")
    if not dev_set:
        raise DataError("GRU dev split is empty")
    if vocab.kind != "word":
        raise ConfigError("the GRU baseline needs a word vocabulary")
    labels = np.array([e.label for e in train_set])
    if labels.min() < 0 or labels.max() >= config.num_classes:
        raise DataError(f"training labels must lie in [0, {config.num_classes})")

    root = RngStream(seed, "gru")
    params = init_gru_params(config, len(vocab), root.child("init"))
    drop_rng = root.child("dropout")
    order_rng = root.child("order")
    state = AdamState(lr=config.lr)
    tensors = params.tensors()

    train_enc = encode_batch([e.text for e in train_set], vocab, config.max_len)
    dev_enc = encode_batch([e.text for e in dev_set], vocab, config.max_len)
    dev_labels = np.array([e.label for e in dev_set])

    records: list[MetricsRecord] = []
    best_f1, best_arrays = -1.0, None
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(train_set))
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            for t in tensors.values():
                t.zero_grad()
            logits = gru_forward(train_enc.take(idx), params, config, training=True, rng=drop_rng)
            loss = cross_entropy(logits, labels[idx])
            backward(loss)
            adam_step(tensors, None, state)
        train_pred = gru_probabilities(train_enc, params, config).argmax(axis=1)
        dev_pred = gru_probabilities(dev_enc, params, config).argmax(axis=1)
        records.append(evaluate(train_pred, labels, config.num_classes, epoch, "train", task))
        dev_rec = evaluate(dev_pred, dev_labels, config.num_classes, epoch, "dev", task)
        records.append(dev_rec)
        log.info("gru epoch %d: dev acc %.4f macro-F1 %.4f", epoch, dev_rec.accuracy, dev_rec.macro_f1)
        if dev_rec.macro_f1 > best_f1:
            best_f1 = dev_rec.macro_f1
            best_arrays = {k: t.data.copy() for k, t in tensors.items()}

    best_epoch = select_best(records, task)
    if selection == "last":
        best_epoch, best_arrays = config.epochs, None
    ckpt = gru_checkpoint(params, config, vocab, {"best_epoch": best_epoch, "task": task, "seed": seed},
                          arrays=best_arrays)
    return ckpt, records
