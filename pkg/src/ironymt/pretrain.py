"""Masked-LM + next-sentence pre-training, from scratch or resumed from a checkpoint."""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .autodiff import (AdamState, RngStream, Tensor, adam_step, backward, cross_entropy,
                       log_softmax)
from .checkpoint import ModelCheckpoint
from .encoder import (EncoderConfig, EncoderParams, check_params, encoder_forward,
                      init_encoder_params, parameter_shapes)
from .errors import CheckpointConfigError, ConfigError, DataError
from .io import atomic_write_text
from .tokenization import (Vocabulary, encode_batch, make_nsp_pairs, mask_for_mlm,
                           words)

log = logging.getLogger(__name__)

PROVENANCE_TAGS = ("generic", "in-domain")
_SENTENCE_END = re.compile(r"(?<=[.!?؟۔…])\s+")


@dataclass
class PretrainConfig:
    mask_rate: float = 0.15
    mlm_weight: float = 1.0
    nsp_weight: float = 1.0
    lr: float = 1e-3
    epochs: int = 10
    batch: int = 32
    min_doc_words: int = 0
    max_len: int = 50
    group_size: int = 4

    def __post_init__(self):
        if self.mlm_weight < 0 or self.nsp_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.mlm_weight == 0 and self.nsp_weight == 0:
            raise ConfigError("mlm_weight and nsp_weight cannot both be zero")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must lie in [0, 1), got {self.mask_rate}")
        for name in ("lr", "epochs", "batch", "max_len", "group_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"PretrainConfig.{name} must be positive")

    @classmethod
    def continued(cls, **overrides) -> "PretrainConfig":
        """Continued in-domain pre-training: lr 2e-5, 10 epochs, documents of more than 20 words."""
        return cls(**{"lr": 2e-5, "epochs": 10, "min_doc_words": 21, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass
class Corpus:
    documents: list[list[str]]
    provenance: str = "generic"

    def __post_init__(self):
        if self.provenance not in PROVENANCE_TAGS:
            raise ConfigError(f"corpus provenance must be one of {PROVENANCE_TAGS}")
        for d, doc in enumerate(self.documents):
            if any(not s.strip() for s in doc):
                raise DataError(f"document {d} contains an empty sentence")

    def __len__(self) -> int:
        return len(self.documents)

    def texts(self) -> list[str]:
        return [" ".join(doc) for doc in self.documents]


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_END.split(text.strip()) if s.strip()]


def filter_corpus(lines: Iterable[str], min_doc_words: int = 0, provenance: str = "generic") -> Corpus:
    """Keep lines with at least ``min_doc_words`` words (21 means "more than 20"), in order."""
    docs = []
    for line in lines:
        if not line.strip() or len(words(line)) < min_doc_words:
            continue
        docs.append(split_sentences(line))
    return Corpus(docs, provenance)


def nsp_documents(corpus: Corpus, group_size: int = 4) -> list[list[str]]:
    """Documents usable for sentence pairs.

    Multi-sentence documents pass through. Runs of consecutive single-sentence
    documents (typical for tweets) are grouped ``group_size`` at a time into
    pseudo-documents, so adjacent tweets stand in for adjacent sentences. A
    trailing singleton joins the previous group.
    """
    out: list[list[str]] = []
    run: list[str] = []

    def flush():
        groups = [run[i:i + group_size] for i in range(0, len(run), group_size)]
        if len(groups) > 1 and len(groups[-1]) == 1:
            groups[-2].extend(groups.pop())
        out.extend(g for g in groups if len(g) >= 2)
        run.clear()

    for doc in corpus.documents:
        if len(doc) >= 2:
            flush()
            out.append(list(doc))
        elif doc:
            run.append(doc[0])
    flush()
    return out


def pretraining_head_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    h = config.hidden
    return {"mlm.W": (h, config.vocab_size), "mlm.b": (config.vocab_size,),
            "nsp.W": (h, 2), "nsp.b": (2,)}


def _init_heads(config: EncoderConfig, rng: RngStream) -> dict[str, Tensor]:
    out = {}
    for name, shape in pretraining_head_shapes(config).items():
        data = rng.normal(shape, config.init_std) if len(shape) == 2 else np.zeros(shape)
        out[name] = Tensor(data, True)
    return out


def mlm_logits(hidden: Tensor, targets: np.ndarray, params: dict[str, Tensor]) -> tuple[Tensor, np.ndarray]:
    """Vocabulary logits at the selected positions only, with their target ids."""
    b, n, h = hidden.shape
    flat_targets = targets.reshape(-1)
    where = np.flatnonzero(flat_targets >= 0)
    rows = hidden.reshape(b * n, h)[where]
    return rows @ params["mlm.W"] + params["mlm.b"], flat_targets[where]


def _config_diff(a: dict, b: dict) -> dict:
    keys = set(a) | set(b)
    return {k: (a.get(k), b.get(k)) for k in keys if a.get(k) != b.get(k)}


def _tensors_from(ckpt: ModelCheckpoint, names) -> dict[str, Tensor]:
    return {n: Tensor(np.array(ckpt.params[n]), True) for n in names}


def encoder_config_of(ckpt: ModelCheckpoint) -> EncoderConfig:
    return EncoderConfig.from_dict(ckpt.config["encoder"])


def write_loss_trace(path, trace: Sequence[tuple[int, float, float]]) -> None:
    atomic_write_text(path, "".join(f"{e}\t{m!r}\t{n!r}\n" for e, m, n in trace))


def untrained_checkpoint(encoder_config: EncoderConfig, vocab: Vocabulary, seed: int) -> ModelCheckpoint:
    """The exact starting point ``pretrain`` uses from scratch for this seed."""
    root = RngStream(seed, "pretrain")
    params = init_encoder_params(encoder_config, root.child("init"))
    params.update(_init_heads(encoder_config, root.child("init-heads")))
    return ModelCheckpoint(kind="encoder", config={"encoder": encoder_config.to_dict(), "mlm_head": "separate"},
                           vocab_fingerprint=vocab.fingerprint(),
                           params={k: t.data.copy() for k, t in params.items()}, provenance="scratch",
                           meta={"seed": seed})


def pretrain(corpus: Corpus, vocab: Vocabulary, config: PretrainConfig, seed: int, *,
             encoder_config: EncoderConfig | None = None, initial: ModelCheckpoint | None = None,
             resume: bool = False) -> tuple[ModelCheckpoint, list[tuple[int, float, float]]]:
    """Minimise ``mlm_weight * CE(masked) + nsp_weight * CE(next-sentence)`` with Adam.

    With ``initial`` the encoder (and pre-training heads, when present) start
    from that checkpoint. ``resume=True`` additionally restores its optimizer
    and RNG state, so a split run matches an uninterrupted one bitwise.
    Returns the new checkpoint and one ``(epoch, mlm_loss, nsp_loss)`` per epoch.
    """
    if vocab.kind != "subword":
        raise ConfigError("pre-training needs a subword vocabulary")
    if initial is not None:
        initial.check_fingerprint(vocab.fingerprint())
        enc_cfg = encoder_config_of(initial)
        if encoder_config is not None:
            diff = _config_diff(enc_cfg.to_dict(), encoder_config.to_dict())
            if diff:
                raise CheckpointConfigError(diff)
    elif encoder_config is None:
        raise ConfigError("pre-training from scratch needs an encoder_config")
    else:
        enc_cfg = encoder_config
    if enc_cfg.vocab_size != len(vocab):
        raise ConfigError(f"encoder vocab_size {enc_cfg.vocab_size} != vocabulary size {len(vocab)}")
    if resume and (initial is None or initial.optimizer is None or initial.rng_state is None):
        raise ConfigError("resume=True needs an initial checkpoint carrying optimizer and RNG state")

    root = RngStream(seed, "pretrain")
    if initial is None:
        params: dict[str, Tensor] = init_encoder_params(enc_cfg, root.child("init"))
        params.update(_init_heads(enc_cfg, root.child("init-heads")))
        done = 0
    else:
        params = _tensors_from(initial, parameter_shapes(enc_cfg))
        head_names = pretraining_head_shapes(enc_cfg)
        if all(n in initial.params for n in head_names):
            params.update(_tensors_from(initial, head_names))
        else:
            params.update(_init_heads(enc_cfg, root.child("init-heads")))
        done = int(initial.meta.get("epochs_completed", 0)) if resume else 0
    check_params(params, enc_cfg)

    docs = nsp_documents(corpus, config.group_size)
    pairs = make_nsp_pairs(docs, root.child("pairs"))
    max_len = min(config.max_len, enc_cfg.max_len)
    enc = encode_batch([p.first for p in pairs], vocab, max_len, [p.second for p in pairs])
    nsp = np.array([p.is_next for p in pairs], dtype=np.int64)

    if resume:
        train_rng = RngStream.from_state(initial.rng_state)
        opt = initial.optimizer
        state = AdamState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], epsilon=opt["epsilon"],
                          step=opt["step"],
                          first_moment={k: v.copy() for k, v in opt["first_moment"].items()},
                          second_moment={k: v.copy() for k, v in opt["second_moment"].items()})
        state.lr = config.lr
    else:
        train_rng = root.child("train")
        state = AdamState(lr=config.lr)

    trace = []
    for epoch in range(done + 1, done + config.epochs + 1):
        order = train_rng.permutation(len(enc))
        mlm_losses, nsp_losses = [], []
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            masked = mask_for_mlm(enc.take(idx).trim(), vocab, config.mask_rate, train_rng, nsp[idx])
            for t in params.values():
                t.zero_grad()
            hidden, pooled = encoder_forward(masked.inputs, params, enc_cfg, training=True, rng=train_rng)
            nsp_loss = cross_entropy(pooled @ params["nsp.W"] + params["nsp.b"], masked.nsp_labels)
            loss = nsp_loss * config.nsp_weight
            logits, targets = mlm_logits(hidden, masked.mlm_targets, params)
            if targets.size:
                mlm_loss = cross_entropy(logits, targets)
                loss = loss + mlm_loss * config.mlm_weight
                mlm_losses.append(mlm_loss.item())
            nsp_losses.append(nsp_loss.item())
            if config.nsp_weight == 0 and not targets.size:
                continue
            backward(loss)
            adam_step(params, None, state)
        mlm_mean = float(np.mean(mlm_losses)) if mlm_losses else 0.0
        trace.append((epoch, mlm_mean, float(np.mean(nsp_losses))))
        log.info("pretrain epoch %d: mlm %.4f nsp %.4f", epoch, mlm_mean, trace[-1][2])

    provenance = "pretrained-indomain" if corpus.provenance == "in-domain" else "pretrained-generic"
    meta = {"epochs_completed": done + config.epochs, "seed": seed, "corpus_documents": len(corpus)}
    if initial is not None:
        meta["initialized_from"] = initial.provenance
    ckpt = ModelCheckpoint(
        kind="encoder",
        config={"encoder": enc_cfg.to_dict(), "pretrain": config.to_dict(), "mlm_head": "separate"},
        vocab_fingerprint=vocab.fingerprint(),
        params={k: t.data.copy() for k, t in params.items()},
        provenance=provenance,
        optimizer={**state.hyperparameters(), "step": state.step,
                   "first_moment": {k: v.copy() for k, v in state.first_moment.items()},
                   "second_moment": {k: v.copy() for k, v in state.second_moment.items()}},
        rng_state=train_rng.state(),
        meta=meta,
    )
    return ckpt, trace


def mlm_eval(checkpoint: ModelCheckpoint, corpus: Corpus, vocab: Vocabulary, seed: int,
             mask_rate: float = 0.15, batch: int = 64) -> float:
    """Mean masked-token cross-entropy over ``corpus``, one sequence per document.

    Masks depend only on ``seed`` and the corpus, so two checkpoints evaluated
    with the same seed are scored on identical positions.
    """
    checkpoint.check_fingerprint(vocab.fingerprint())
    enc_cfg = encoder_config_of(checkpoint)
    names = list(parameter_shapes(enc_cfg)) + ["mlm.W", "mlm.b"]
    missing = [n for n in names if n not in checkpoint.params]
    if missing:
        raise ConfigError(f"checkpoint lacks parameters needed for MLM evaluation: {missing[:3]}")
    params = {n: Tensor(checkpoint.params[n]) for n in names}
    texts = corpus.texts()
    if not texts:
        raise DataError("cannot evaluate on an empty corpus")
    enc = encode_batch(texts, vocab, enc_cfg.max_len)
    masked = mask_for_mlm(enc, vocab, mask_rate, RngStream(seed, "mlm-eval"))
    total, count = 0.0, 0
    for start in range(0, len(enc), batch):
        sl = slice(start, start + batch)
        part = masked.inputs.take(sl)
        hidden, _ = encoder_forward(part, params, enc_cfg)
        logits, targets = mlm_logits(hidden, masked.mlm_targets[sl], params)
        if targets.size:
            logp = log_softmax(logits, axis=-1).data
            total -= float(logp[np.arange(targets.size), targets].sum())
            count += targets.size
    if count == 0:
        raise DataError("no positions were selected for masked evaluation")
    return total / count


def encoder_tensors(ckpt: ModelCheckpoint, requires_grad: bool = True) -> EncoderParams:
    cfg = encoder_config_of(ckpt)
    return {n: Tensor(np.array(ckpt.params[n]), requires_grad) for n in parameter_shapes(cfg)}
