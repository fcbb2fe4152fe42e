"""Single- and multi-task fine-tuning of a shared encoder with per-task heads.

Multi-task training mixes at the batch level: every epoch, each task's data is
cut into mini-batches, all ``(task, batch)`` pairs are concatenated and
shuffled, and each step updates the shared encoder plus the head of that
step's task only. One Adam state is shared by all parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .autodiff import (AdamState, RngStream, Tensor, adam_step, backward, cross_entropy, dropout,
                       softmax)
from .checkpoint import ModelCheckpoint
from .data import Example, load_dataset
from .encoder import (EncoderConfig, check_params, encoder_forward, head_features,
                      init_encoder_params, parameter_shapes, rowwise_linear)
from .errors import ConfigError, DataError, TaskLookupError
from .metrics import SELECTIONS, MetricsRecord, evaluate, select_best
from .tokenization import EncodedBatch, Vocabulary, encode_batch

log = logging.getLogger(__name__)

HEAD_INIT_STD = 0.02


@dataclass
class TaskSpec:
    name: str
    num_classes: int
    train_path: str | None = None
    dev_path: str | None = None
    is_target: bool = False
    labels: list[str] | None = None

    def __post_init__(self):
        if self.num_classes <= 0:
            raise ConfigError(f"task {self.name!r}: num_classes must be positive")
        if self.labels is not None and len(self.labels) != self.num_classes:
            raise ConfigError(f"task {self.name!r}: {len(self.labels)} label names for {self.num_classes} classes")

    def label_names(self) -> list[str]:
        return list(self.labels) if self.labels else [str(i) for i in range(self.num_classes)]


@dataclass
class TaskData:
    spec: TaskSpec
    train: list[Example]
    dev: list[Example] = field(default_factory=list)

    @classmethod
    def load(cls, spec: TaskSpec) -> "TaskData":
        labels = spec.label_names()
        train = load_dataset(spec.train_path, labels) if spec.train_path else []
        dev = load_dataset(spec.dev_path, labels) if spec.dev_path else []
        return cls(spec, train, dev)


@dataclass
class FinetuneConfig:
    max_len: int = 50
    batch: int = 32
    lr: float = 2e-5
    epochs: int = 20
    seed: int = 0
    aux_multiple: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) <= 0:
                raise ConfigError(f"FinetuneConfig.{f.name} must be positive, got {getattr(self, f.name)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass
class MixedSchedule:
    entries: list[tuple[str, int]]
    seed: int

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def build_mixed_schedule(batch_counts: Mapping[str, int], seed: int, stream: str = "") -> MixedSchedule:
    """Every ``(task, batch_index)`` pair exactly once, in a seeded random order."""
    entries = [(task, b) for task, count in batch_counts.items() for b in range(count)]
    perm = RngStream(seed, f"schedule/{stream}").permutation(len(entries))
    return MixedSchedule([entries[i] for i in perm], seed)


def head_names(task: str) -> tuple[str, str]:
    return f"head.{task}.W", f"head.{task}.b"


@dataclass
class MultiTaskModel:
    encoder_config: EncoderConfig
    params: dict[str, Tensor]
    heads: dict[str, int]
    vocab_fingerprint: str
    provenance: str = "scratch"
    labels: dict[str, list[str]] = field(default_factory=dict)

    def encoder_params(self) -> dict[str, Tensor]:
        return {n: self.params[n] for n in parameter_shapes(self.encoder_config)}

    def head_params(self, task: str) -> dict[str, Tensor]:
        if task not in self.heads:
            raise TaskLookupError(f"no head for task {task!r}; available: {sorted(self.heads)}")
        return {n: self.params[n] for n in head_names(task)}

    def to_checkpoint(self, finetune: FinetuneConfig | None = None, meta: dict | None = None,
                      arrays: dict[str, np.ndarray] | None = None) -> ModelCheckpoint:
        h = self.encoder_config.hidden
        config = {"encoder": self.encoder_config.to_dict()}
        if finetune is not None:
            config["finetune"] = finetune.to_dict()
        return ModelCheckpoint(
            kind="encoder", config=config, vocab_fingerprint=self.vocab_fingerprint,
            params=arrays if arrays is not None else {k: t.data.copy() for k, t in self.params.items()},
            provenance=self.provenance, heads={t: [h, k] for t, k in self.heads.items()},
            meta={"labels": self.labels, **(meta or {})},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint, requires_grad: bool = False) -> "MultiTaskModel":
        cfg = EncoderConfig.from_dict(ckpt.config["encoder"])
        names = list(parameter_shapes(cfg))
        for task in ckpt.heads:
            names.extend(head_names(task))
        params = {n: Tensor(np.array(ckpt.params[n]), requires_grad) for n in names}
        check_params(params, cfg)
        return cls(cfg, params, {t: int(s[1]) for t, s in ckpt.heads.items()}, ckpt.vocab_fingerprint,
                   ckpt.provenance, dict(ckpt.meta.get("labels", {})))


def scratch_encoder(config: EncoderConfig, vocab: Vocabulary, seed: int) -> ModelCheckpoint:
    """A randomly initialised encoder checkpoint (no pre-training)."""
    if config.vocab_size != len(vocab):
        raise ConfigError(f"encoder vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
    params = init_encoder_params(config, RngStream(seed, "encoder-init"))
    return ModelCheckpoint(kind="encoder", config={"encoder": config.to_dict()},
                           vocab_fingerprint=vocab.fingerprint(),
                           params={k: t.data for k, t in params.items()}, provenance="scratch")


def attach_heads(checkpoint: ModelCheckpoint, tasks: Sequence[TaskSpec], rng: RngStream) -> MultiTaskModel:
    """Add one ``hidden -> num_classes`` linear head per task, weights from N(0, 0.02^2)."""
    names = [t.name for t in tasks]
    dupes = sorted({n for n in names if names.count(n) > 1} | (set(names) & set(checkpoint.heads)))
    if dupes:
        raise ConfigError(f"duplicate task head name(s): {dupes}")
    if checkpoint.kind != "encoder":
        raise ConfigError(f"cannot attach heads to a {checkpoint.kind!r} checkpoint")
    model = MultiTaskModel.from_checkpoint(checkpoint, requires_grad=True)
    h = model.encoder_config.hidden
    for spec in tasks:
        w, b = head_names(spec.name)
        model.params[w] = Tensor(rng.child(spec.name).normal((h, spec.num_classes), HEAD_INIT_STD), True)
        model.params[b] = Tensor(np.zeros(spec.num_classes), True)
        model.heads[spec.name] = spec.num_classes
        model.labels[spec.name] = spec.label_names()
    return model


def task_logits(model: MultiTaskModel, task: str, batch: EncodedBatch, training: bool = False,
                rng: RngStream | None = None) -> Tensor:
    w, b = model.head_params(task).values()
    hidden, pooled = encoder_forward(batch, model.params, model.encoder_config, training, rng)
    features = head_features(hidden, pooled, model.encoder_config)
    features = dropout(features, model.encoder_config.dropout, training, rng)
    return rowwise_linear(features, w, b)


def predict_proba(model: MultiTaskModel, task: str, batch: EncodedBatch, batch_size: int = 32) -> np.ndarray:
    """Eval-mode class probabilities; identical regardless of ``batch_size``."""
    model.head_params(task)
    out = []
    for start in range(0, len(batch), batch_size):
        part = batch.take(slice(start, start + batch_size))
        out.append(softmax(task_logits(model, task, part), axis=-1).data)
    return np.concatenate(out) if out else np.zeros((0, model.heads[task]))


@dataclass(frozen=True)
class Prediction:
    label: int
    probabilities: tuple[float, ...]


def predict(model: MultiTaskModel | ModelCheckpoint, task: str, texts: Sequence[str], vocab: Vocabulary,
            max_len: int | None = None, batch_size: int = 32) -> list[Prediction]:
    """Argmax label (lowest index on ties) and softmax probabilities per text."""
    if isinstance(model, ModelCheckpoint):
        model.check_fingerprint(vocab.fingerprint())
        model = MultiTaskModel.from_checkpoint(model)
    model.head_params(task)
    if not texts:
        return []
    max_len = max_len or model.encoder_config.max_len
    probs = predict_proba(model, task, encode_batch(list(texts), vocab, max_len), batch_size)
    return [Prediction(int(np.argmax(p)), tuple(float(x) for x in p)) for p in probs]


def _eval_record(model, task, enc: EncodedBatch, labels: np.ndarray, epoch: int, split: str,
                 batch_size: int) -> tuple[MetricsRecord, float]:
    probs = predict_proba(model, task, enc, batch_size)
    loss = float(-np.mean(np.log(probs[np.arange(len(labels)), labels])))
    return evaluate(probs.argmax(axis=1), labels, model.heads[task], epoch, split, task), loss


def train_step(model: MultiTaskModel, task: str, batch: EncodedBatch, labels: np.ndarray, state: AdamState,
               rng: RngStream | None = None) -> float:
    """One Adam update of the shared encoder and ``task``'s head; other heads are untouched."""
    step_params = {**model.encoder_params(), **model.head_params(task)}
    for t in step_params.values():
        t.zero_grad()
    loss = cross_entropy(task_logits(model, task, batch, training=True, rng=rng), labels)
    backward(loss)
    adam_step(step_params, None, state)
    return loss.item()


@dataclass
class _Encoded:
    train: EncodedBatch
    train_labels: np.ndarray
    dev: EncodedBatch | None
    dev_labels: np.ndarray | None


def finetune(model: MultiTaskModel, tasks: Sequence[TaskData], vocab: Vocabulary, config: FinetuneConfig,
             mode: str = "multi", selection: str = "dev") -> tuple[ModelCheckpoint, list[MetricsRecord], dict]:
    """Train ``model`` on ``tasks``; return the best target-dev checkpoint and the metrics trace.

    Epochs count passes over the target task. Auxiliary tasks are sub-sampled
    each epoch to at most ``ceil(aux_multiple * n_target)`` examples. The third
    return value maps ``task -> [per-epoch eval-mode train loss]``.
    """
    if selection not in SELECTIONS:
        raise ConfigError(f"selection must be one of {SELECTIONS}, got {selection!r}")
    if mode not in ("single", "multi"):
        raise ConfigError(f"mode must be 'single' or 'multi', got {mode!r}")
    if mode == "single" and len(tasks) != 1:
        raise ConfigError(f"single-task mode needs exactly one task, got {len(tasks)}")
    if not tasks:
        raise ConfigError("no tasks given")
    targets = [t for t in tasks if t.spec.is_target] or ([tasks[0]] if len(tasks) == 1 else [])
    if len(targets) != 1:
        raise ConfigError(f"exactly one task must be the target, found {len(targets)}")
    target = targets[0].spec.name
    if model.vocab_fingerprint != vocab.fingerprint():
        model_ck = model.to_checkpoint()
        model_ck.check_fingerprint(vocab.fingerprint())
    for td in tasks:
        model.head_params(td.spec.name)
        if not td.train:
            raise DataError(f"task {td.spec.name!r} has no training data")
    if not targets[0].dev:
        raise DataError(f"target task {target!r} has no dev data")

    max_len = min(config.max_len, model.encoder_config.max_len)
    encoded: dict[str, _Encoded] = {}
    for td in tasks:
        k = td.spec.num_classes
        for split, exs in (("train", td.train), ("dev", td.dev)):
            bad = [e.id for e in exs if not 0 <= e.label < k]
            if bad:
                raise DataError(f"task {td.spec.name!r} {split} example {bad[0]!r} has a label outside [0, {k})")
        encoded[td.spec.name] = _Encoded(
            encode_batch([e.text for e in td.train], vocab, max_len),
            np.array([e.label for e in td.train], dtype=np.int64),
            encode_batch([e.text for e in td.dev], vocab, max_len) if td.dev else None,
            np.array([e.label for e in td.dev], dtype=np.int64) if td.dev else None,
        )

    root = RngStream(config.seed, "finetune")
    drop_rng = root.child("dropout")
    state = AdamState(lr=config.lr)
    n_target = len(encoded[target].train)
    cap = max(1, math.ceil(config.aux_multiple * n_target))

    records: list[MetricsRecord] = []
    losses: dict[str, list[float]] = {td.spec.name: [] for td in tasks}
    best_f1, best_arrays = -1.0, None
    for epoch in range(1, config.epochs + 1):
        sample_rng = root.child(f"epoch{epoch}")
        batches: dict[str, list[np.ndarray]] = {}
        for td in tasks:
            name = td.spec.name
            n = len(encoded[name].train)
            order = sample_rng.child(name).permutation(n)
            if name != target and n > cap:
                order = order[:cap]
            batches[name] = [order[i:i + config.batch] for i in range(0, len(order), config.batch)]
        schedule = build_mixed_schedule({k: len(v) for k, v in batches.items()}, config.seed, f"epoch{epoch}")
        for task, bi in schedule:
            idx = batches[task][bi]
            data = encoded[task]
            train_step(model, task, data.train.take(idx).trim(), data.train_labels[idx], state, drop_rng)

        for td in tasks:
            name = td.spec.name
            data = encoded[name]
            rec, loss = _eval_record(model, name, data.train, data.train_labels, epoch, "train", config.batch)
            records.append(rec)
            losses[name].append(loss)
            if data.dev is not None:
                rec, _ = _eval_record(model, name, data.dev, data.dev_labels, epoch, "dev", config.batch)
                records.append(rec)
                if name == target:
                    log.info("epoch %d: %s dev acc %.4f macro-F1 %.4f", epoch, name, rec.accuracy, rec.macro_f1)
                    if rec.macro_f1 > best_f1:
                        best_f1 = rec.macro_f1
                        best_arrays = {k: t.data.copy() for k, t in model.params.items()}

    best_epoch = select_best(records, target)
    if selection == "last":
        best_epoch, best_arrays = config.epochs, None
    meta = {"target": target, "best_epoch": best_epoch, "mode": mode,
            "tasks": [td.spec.name for td in tasks]}
    return model.to_checkpoint(config, meta, arrays=best_arrays), records, losses
