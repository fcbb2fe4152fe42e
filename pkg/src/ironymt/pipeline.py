"""Manifest-driven runs: vocabulary, pre-training phases, training, prediction.

Every phase writes its artifacts atomically and records a fingerprint of its
inputs in ``state.json``. Rerunning a manifest skips phases whose fingerprint
is unchanged and whose outputs are still on disk, and reruns everything from
the first phase that differs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import RngStream
from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .data import load_dataset, load_texts, read_lines, split_train_dev
from .encoder import EncoderConfig
from .errors import ConfigError, IronyMTError, StateError, TaskLookupError
from .gru import GruConfig, GruParams, gru_probabilities, train_gru
from .io import atomic_write_text, sha256_file
from .manifest import RunManifest
from .metrics import write_metrics
from .mtl import (FinetuneConfig, Prediction, TaskData, TaskSpec, attach_heads, finetune,
                  predict, scratch_encoder)
from .pretrain import PretrainConfig, filter_corpus, pretrain, write_loss_trace
from .tokenization import Vocabulary, build_word_vocab, encode_batch, train_subword_vocab

log = logging.getLogger(__name__)

DEFAULT_SUBWORD_SIZE = 1000


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def predict_texts(ckpt: ModelCheckpoint, task: str, texts: Sequence[str], vocab: Vocabulary,
                  batch_size: int = 32) -> list[Prediction]:
    """Eval-mode predictions from either a GRU or an encoder checkpoint."""
    ckpt.check_fingerprint(vocab.fingerprint())
    if ckpt.kind == "encoder":
        return predict(ckpt, task, texts, vocab, batch_size=batch_size)
    if ckpt.kind != "gru":
        raise ConfigError(f"cannot predict with a {ckpt.kind!r} checkpoint")
    if ckpt.meta.get("task") != task:
        raise TaskLookupError(f"no head for task {task!r}; available: [{ckpt.meta.get('task')!r}]")
    if not texts:
        return []
    config = GruConfig.from_dict(ckpt.config)
    params = GruParams.from_arrays(ckpt.params, requires_grad=False)
    probs = gru_probabilities(encode_batch(list(texts), vocab, config.max_len), params, config)
    return [Prediction(int(np.argmax(p)), tuple(float(x) for x in p)) for p in probs]


def format_predictions(ids: Sequence[str], preds: Sequence[Prediction], labels: Sequence[str]) -> str:
    return "".join(f"{i}\t{labels[p.label]}\t{','.join(repr(x) for x in p.probabilities)}\n"
                   for i, p in zip(ids, preds))


class RunLock:
    """Exclusive ownership of an output directory for one run."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StateError(f"{self.path.parent} is locked by another run "
                             f"(remove {self.path} if that run is gone)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


@dataclass
class PhaseResult:
    name: str
    status: str
    outputs: dict[str, str] = field(default_factory=dict)
    detail: dict = field(default_factory=dict)


class Run:
    def __init__(self, manifest: RunManifest, use_all_training_data: bool | None = None):
        self.m = manifest
        self.out = Path(manifest.output_dir)
        self.use_all = manifest.use_all_training_data if use_all_training_data is None else use_all_training_data
        self.base = manifest.source.parent if manifest.source else Path(".")
        self.state_path = self.out / "state.json"
        self.state = json.loads(self.state_path.read_text()) if self.state_path.exists() else {}
        self.results: list[PhaseResult] = []
        self._dirty = False

    def _rel(self, p: Path) -> str:
        try:
            return os.path.relpath(p, self.base)
        except ValueError:
            return str(p)

    def _hash_inputs(self, paths: Sequence[Path]) -> dict[str, str]:
        return {self._rel(p): sha256_file(p) for p in paths}

    def _phase(self, name: str, fingerprint: dict, outputs: Sequence[str], fn) -> PhaseResult:
        key = _digest(fingerprint)
        have = all((self.out / o).exists() for o in outputs)
        if not self._dirty and have and self.state.get(name) == key:
            result = PhaseResult(name, "skipped")
        else:
            self._dirty = True
            self.state.pop(name, None)
            detail = fn() or {}
            self.state[name] = key
            atomic_write_text(self.state_path, json.dumps(self.state, indent=1, sort_keys=True) + "\n")
            result = PhaseResult(name, "completed", detail=detail)
        result.outputs = {o: sha256_file(self.out / o) for o in outputs}
        self.results.append(result)
        return result

    def tasks(self) -> list[TaskData]:
        out = []
        strip = self.m.strip_pattern
        for entry in self.m.tasks:
            train = load_dataset(entry.train, entry.labels, strip)
            dev = load_dataset(entry.dev, entry.labels, strip) if entry.dev else []
            if entry.target and not dev:
                train, dev = split_train_dev(train, self.m.dev_fraction, self.m.seed, self.m.stratify)
            spec = TaskSpec(entry.name, len(entry.labels), is_target=entry.target, labels=entry.labels)
            out.append(TaskData(spec, train, dev))
        if self.use_all:
            target = next(t for t in out if t.spec.is_target)
            target.train = sorted(target.train + target.dev, key=lambda e: e.id)
        return out

    def vocab_texts(self, tasks: Sequence[TaskData]) -> list[str]:
        texts = [e.text for t in tasks for e in t.train]
        if self.m.model != "gru":
            for phase in self.m.pretrain:
                texts.extend(read_lines(phase.corpus))
        return texts

    def execute(self) -> dict:
        m = self.m
        m.validate()
        inputs = self._hash_inputs(m.input_files())
        tasks = self.tasks()
        base_fp = {"inputs": inputs, "seed": m.seed, "use_all": self.use_all, "dev_fraction": m.dev_fraction,
                   "stratify": m.stratify, "strip": m.strip_pattern}

        def build_vocab():
            if m.vocab_path:
                vocab = Vocabulary.load(m.vocab_path)
            elif m.vocab["kind"] == "word":
                vocab = build_word_vocab(self.vocab_texts(tasks), int(m.vocab.get("size", GruConfig.vocab_size)))
            else:
                vocab = train_subword_vocab(self.vocab_texts(tasks), int(m.vocab.get("size", DEFAULT_SUBWORD_SIZE)))
            vocab.save(self.out / "vocab.txt")
            return {"size": len(vocab), "kind": vocab.kind}

        fp = {**base_fp, "vocab": m.vocab, "model": m.model}
        self._phase("vocab", fp, ["vocab.txt"], build_vocab)
        vocab = Vocabulary.load(self.out / "vocab.txt")

        if m.model == "gru":
            self._train_gru(tasks, vocab, fp)
        else:
            self._train_encoder(tasks, vocab, fp)

        target = next(t for t in tasks if t.spec.is_target)

        def do_predict():
            if m.predict:
                rows = load_texts(m.predict)
            else:
                rows = [(e.id, e.text) for e in target.dev]
            ckpt = load_checkpoint(self.out / "model.ckpt", vocab.fingerprint())
            preds = predict_texts(ckpt, target.spec.name, [t for _, t in rows], vocab)
            atomic_write_text(self.out / "predictions.tsv",
                              format_predictions([i for i, _ in rows], preds, target.spec.label_names()))
            return {"rows": len(rows)}

        fp = {**fp, "model_ckpt": sha256_file(self.out / "model.ckpt")}
        self._phase("predict", fp, ["predictions.tsv"], do_predict)
        return inputs

    def _train_gru(self, tasks: list[TaskData], vocab: Vocabulary, fp: dict) -> None:
        td = tasks[0]
        config = GruConfig.from_dict({**self.m.gru, "num_classes": td.spec.num_classes})

        def train():
            ckpt, records = train_gru(td.train, td.dev, vocab, config, self.m.seed, td.spec.name,
                                      "last" if self.use_all else "dev")
            save_checkpoint(ckpt, self.out / "model.ckpt")
            write_metrics(self.out / "metrics.jsonl", records)
            return {"best_epoch": ckpt.meta["best_epoch"]}

        fp.update(gru=config.to_dict())
        self._phase("train", fp, ["model.ckpt", "metrics.jsonl"], train)

    def _train_encoder(self, tasks: list[TaskData], vocab: Vocabulary, fp: dict) -> None:
        m = self.m
        enc = dict(m.encoder)
        preset = enc.pop("preset", "desk")
        enc_cfg = EncoderConfig.preset(preset, len(vocab), **enc)
        prev = None
        for i, phase in enumerate(m.pretrain, start=1):
            if phase.provenance == "in-domain" and i > 1:
                cfg = PretrainConfig.continued(**phase.config)
            else:
                cfg = PretrainConfig(**phase.config)
            name = f"pretrain-{i}-{phase.provenance}"

            def run_phase(phase=phase, cfg=cfg, name=name, prev=prev):
                initial = load_checkpoint(prev, vocab.fingerprint()) if prev else (
                    load_checkpoint(m.initial_checkpoint, vocab.fingerprint()) if m.initial_checkpoint else None)
                corpus = filter_corpus(read_lines(phase.corpus), cfg.min_doc_words, phase.provenance)
                ckpt, trace = pretrain(corpus, vocab, cfg, m.seed + i - 1,
                                       encoder_config=None if initial else enc_cfg, initial=initial)
                save_checkpoint(ckpt, self.out / f"{name}.ckpt")
                write_loss_trace(self.out / f"{name}.loss.tsv", trace)
                return {"documents": len(corpus), "final_mlm": trace[-1][1] if trace else None}

            fp = {**fp, name: {"config": cfg.to_dict(), "encoder": enc_cfg.to_dict()}}
            self._phase(name, fp, [f"{name}.ckpt", f"{name}.loss.tsv"], run_phase)
            prev = self.out / f"{name}.ckpt"

        ft = FinetuneConfig.from_dict({**m.finetune, "seed": m.seed})
        mode = "single" if m.model == "encoder-st" else "multi"

        def train():
            if prev is not None:
                base = load_checkpoint(prev, vocab.fingerprint())
            elif m.initial_checkpoint:
                base = load_checkpoint(m.initial_checkpoint, vocab.fingerprint())
            else:
                base = scratch_encoder(enc_cfg, vocab, m.seed)
            base = _strip_pretraining(base)
            model = attach_heads(base, [t.spec for t in tasks], RngStream(m.seed, "heads"))
            ckpt, records, losses = finetune(model, tasks, vocab, ft, mode, "last" if self.use_all else "dev")
            save_checkpoint(ckpt, self.out / "model.ckpt")
            write_metrics(self.out / "metrics.jsonl", records)
            atomic_write_text(self.out / "train_loss.tsv", "".join(
                f"{e}\t{task}\t{v!r}\n" for task, vals in losses.items() for e, v in enumerate(vals, start=1)))
            return {"best_epoch": ckpt.meta["best_epoch"], "mode": mode}

        fp = {**fp, "finetune": ft.to_dict(), "mode": mode, "encoder": enc_cfg.to_dict(),
              "tasks": [t.spec.name for t in tasks]}
        self._phase("train", fp, ["model.ckpt", "metrics.jsonl", "train_loss.tsv"], train)


def _strip_pretraining(ckpt: ModelCheckpoint) -> ModelCheckpoint:
    """Encoder-only view of a checkpoint: drop pre-training heads, optimizer and RNG state."""
    params = {k: v for k, v in ckpt.params.items() if not k.startswith(("mlm.", "nsp."))}
    config = {"encoder": ckpt.config["encoder"]}
    return ModelCheckpoint(kind="encoder", config=config, vocab_fingerprint=ckpt.vocab_fingerprint,
                           params=params, provenance=ckpt.provenance, heads=dict(ckpt.heads),
                           meta=dict(ckpt.meta))


def run(manifest: RunManifest, use_all_training_data: bool | None = None) -> dict:
    """Execute ``manifest``; return (and write) the run summary.

    On failure the summary records the failing phase and the error is re-raised;
    artifacts of completed phases stay in place.
    """
    out = Path(manifest.output_dir)
    job = Run(manifest, use_all_training_data)
    summary = {"name": manifest.name, "model": manifest.model, "seed": manifest.seed,
               "use_all_training_data": job.use_all}
    with RunLock(out):
        try:
            summary["inputs"] = job.execute()
            summary["status"] = "ok"
        except (IronyMTError, OSError) as exc:
            done = {r.name for r in job.results}
            summary["status"] = "failed"
            summary["error"] = f"{type(exc).__name__}: {exc}"
            summary["failed_phase"] = next((p for p in _phase_names(manifest) if p not in done), None)
            raise
        finally:
            summary["phases"] = [{"name": r.name, "status": r.status, "outputs": r.outputs, **r.detail}
                                 for r in job.results]
            atomic_write_text(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def _phase_names(manifest: RunManifest) -> list[str]:
    names = ["vocab"]
    names += [f"pretrain-{i}-{p.provenance}" for i, p in enumerate(manifest.pretrain, start=1)]
    return names + ["train", "predict"]
