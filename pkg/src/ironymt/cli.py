"""Command-line entry point: ``ironymt <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .autodiff import RngStream
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset, load_texts, read_lines, split_train_dev, write_dataset
from .encoder import PRESETS, EncoderConfig
from .errors import ConfigError, IronyMTError
from .gru import GruConfig, train_gru
from .io import atomic_write_text
from .manifest import load_manifest
from .metrics import evaluate, write_metrics
from .mtl import FinetuneConfig, TaskData, TaskSpec, attach_heads, finetune, scratch_encoder
from .pipeline import _strip_pretraining, format_predictions, predict_texts, run
from .pretrain import PretrainConfig, filter_corpus, pretrain, write_loss_trace
from .synthetic import (IRONY_RELEASED, TASK_SCHEMAS, TASK_SETS, SyntheticLanguage, TaskGenerator,
                        generate_corpus, generate_tweets)
from .tokenization import Vocabulary, build_word_vocab, train_subword_vocab

log = logging.getLogger("ironymt")


def _labels_option(values: list[str] | None) -> dict[str, list[str]]:
    out = {}
    for v in values or []:
        name, _, labels = v.partition("=")
        if not labels:
            raise ConfigError(f"--labels expects NAME=a,b,...; got {v!r}")
        out[name] = labels.split(",")
    return out


def _label_set(name: str, custom: dict[str, list[str]]) -> list[str]:
    if name in custom:
        return custom[name]
    if name in TASK_SCHEMAS:
        return TASK_SCHEMAS[name]
    raise ConfigError(f"task {name!r} has no built-in label set; pass --labels {name}=a,b,...")


def _texts_of(path: str) -> list[str]:
    if path.endswith(".tsv"):
        return [t for _, t in load_texts(path)]
    return read_lines(path)


# ---- subcommands -----------------------------------------------------------

def cmd_gen_synthetic(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    standard = SyntheticLanguage(args.seed)
    dialect = standard.dialect(args.seed + 1)
    atomic_write_text(out / "generic.txt", "\n".join(generate_corpus(standard, args.corpus_docs, args.seed)) + "\n")
    atomic_write_text(out / "tweets.txt", "\n".join(generate_tweets(dialect, args.tweets, args.seed)) + "\n")

    scale = args.irony_rows / sum(IRONY_RELEASED.values())
    counts = [int(round(IRONY_RELEASED[c] * scale)) for c in TASK_SCHEMAS["irony"]]
    irony = TaskGenerator.build("irony", dialect, args.seed, noise=args.noise)
    write_dataset(out / "irony_train.tsv", irony.dataset(sum(counts), args.seed, "ir", counts),
                  irony.labels)
    test_n = max(2, math.ceil(args.irony_rows * 0.25))
    write_dataset(out / "irony_test.tsv", irony.dataset(test_n, args.seed + 1, "irt"), irony.labels)
    for name in TASK_SCHEMAS:
        if name == "irony":
            continue
        gen = TaskGenerator.build(name, dialect, args.seed, noise=args.noise)
        data = gen.dataset(args.aux_rows, args.seed, name[:3])
        train, dev = split_train_dev(data, 0.10, args.seed)
        write_dataset(out / f"{name}_train.tsv", train, gen.labels)
        write_dataset(out / f"{name}_dev.tsv", dev, gen.labels)

    base = {"seed": args.seed, "predict": "irony_test.tsv", "encoder": {"preset": "desk"}}
    epochs = {"finetune": {"epochs": args.epochs}}
    manifests = {"gru": {**base, "model": "gru", "tasks": [{"name": "irony", "train": "irony_train.tsv"}],
                         "gru": {"epochs": args.epochs}}}
    generic = [{"corpus": "generic.txt", "provenance": "generic", "config": {"epochs": args.pretrain_epochs}}]
    indomain = generic + [{"corpus": "tweets.txt", "provenance": "in-domain",
                           "config": {"epochs": args.pretrain_epochs}}]
    for set_name, names in TASK_SETS.items():
        tasks = [{"name": "irony", "train": "irony_train.tsv", "target": True}]
        tasks += [{"name": n, "train": f"{n}_train.tsv", "dev": f"{n}_dev.tsv"} for n in names if n != "irony"]
        model = "encoder-st" if set_name == "ST" else "encoder-mt"
        manifests[set_name.lower()] = {**base, **epochs, "model": model, "tasks": tasks, "pretrain": generic}
        if set_name in ("MT5", "MT6"):
            manifests[f"1m-{set_name.lower()}"] = {**base, **epochs, "model": model, "tasks": tasks,
                                                   "pretrain": indomain}
    for key, body in manifests.items():
        body = {"name": key, **body, "output_dir": f"runs/{key}"}
        atomic_write_text(out / f"manifest-{key}.json", json.dumps(body, indent=2) + "\n")
    print(f"wrote synthetic corpora, {len(TASK_SCHEMAS)} task files and {len(manifests)} manifests to {out}")


def cmd_build_vocab(args) -> None:
    texts = [t for path in args.inputs for t in _texts_of(path)]
    if args.kind == "word":
        vocab = build_word_vocab(texts, args.size)
    else:
        vocab = train_subword_vocab(texts, args.size)
    vocab.save(args.out)
    print(f"{args.kind} vocabulary of {len(vocab)} entries -> {args.out} (fingerprint {vocab.fingerprint()[:12]})")


def cmd_pretrain(args) -> None:
    vocab = Vocabulary.load(args.vocab)
    overrides = {k: v for k, v in (("epochs", args.epochs), ("lr", args.lr), ("batch", args.batch),
                                   ("min_doc_words", args.min_doc_words), ("mask_rate", args.mask_rate))
                 if v is not None}
    config = PretrainConfig.continued(**overrides) if args.continued else PretrainConfig(**overrides)
    initial = load_checkpoint(args.init, vocab.fingerprint()) if args.init else None
    corpus = filter_corpus(read_lines(args.corpus), config.min_doc_words, args.provenance)
    enc_cfg = None if initial else EncoderConfig.preset(args.preset, len(vocab))
    ckpt, trace = pretrain(corpus, vocab, config, args.seed, encoder_config=enc_cfg, initial=initial,
                           resume=args.resume)
    save_checkpoint(ckpt, args.out)
    if args.loss_trace:
        write_loss_trace(args.loss_trace, trace)
    for epoch, mlm, nsp in trace:
        print(f"epoch {epoch}\tmlm {mlm:.4f}\tnsp {nsp:.4f}")


def _parse_tasks(args) -> list[TaskData]:
    custom = _labels_option(args.labels)
    out = []
    for i, spec in enumerate(args.task):
        name, _, paths = spec.partition("=")
        if not paths:
            raise ConfigError(f"--task expects NAME=TRAIN[,DEV]; got {spec!r}")
        train_path, _, dev_path = paths.partition(",")
        labels = _label_set(name, custom)
        is_target = name == args.target if args.target else i == 0
        train = load_dataset(train_path, labels)
        dev = load_dataset(dev_path, labels) if dev_path else []
        if is_target and not dev:
            train, dev = split_train_dev(train, args.dev_fraction, args.seed)
        out.append(TaskData(TaskSpec(name, len(labels), is_target=is_target, labels=labels), train, dev))
    if args.use_all_training_data:
        target = next(t for t in out if t.spec.is_target)
        target.train = sorted(target.train + target.dev, key=lambda e: e.id)
    return out


def cmd_finetune(args) -> None:
    vocab = Vocabulary.load(args.vocab)
    tasks = _parse_tasks(args)
    out = Path(args.out)
    selection = "last" if args.use_all_training_data else "dev"
    overrides = {k: v for k, v in (("epochs", args.epochs), ("lr", args.lr), ("batch", args.batch),
                                   ("max_len", args.max_len)) if v is not None}
    if args.model == "gru":
        if len(tasks) != 1:
            raise ConfigError("the GRU baseline trains exactly one task")
        td = tasks[0]
        config = GruConfig(**{**overrides, "num_classes": td.spec.num_classes})
        ckpt, records = train_gru(td.train, td.dev, vocab, config, args.seed, td.spec.name, selection)
    else:
        if args.init:
            base = _strip_pretraining(load_checkpoint(args.init, vocab.fingerprint()))
        else:
            base = scratch_encoder(EncoderConfig.preset(args.preset, len(vocab)), vocab, args.seed)
        config = FinetuneConfig(**overrides, seed=args.seed, aux_multiple=args.aux_multiple)
        model = attach_heads(base, [t.spec for t in tasks], RngStream(args.seed, "heads"))
        mode = "single" if len(tasks) == 1 and not args.multi else "multi"
        ckpt, records, _ = finetune(model, tasks, vocab, config, mode, selection)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "model.ckpt")
    write_metrics(out / "metrics.jsonl", records)
    print(f"best epoch {ckpt.meta['best_epoch']}; checkpoint -> {out / 'model.ckpt'}")


def cmd_evaluate(args) -> None:
    vocab = Vocabulary.load(args.vocab)
    ckpt = load_checkpoint(args.checkpoint, vocab.fingerprint())
    labels = _label_set(args.task, _labels_option(args.labels))
    examples = load_dataset(args.data, labels)
    preds = predict_texts(ckpt, args.task, [e.text for e in examples], vocab)
    rec = evaluate([p.label for p in preds], [e.label for e in examples], len(labels), 0, args.split, args.task)
    if args.out:
        write_metrics(args.out, [rec])
    print(rec.to_json())


def cmd_predict(args) -> None:
    vocab = Vocabulary.load(args.vocab)
    ckpt = load_checkpoint(args.checkpoint, vocab.fingerprint())
    labels = ckpt.meta.get("labels", {}).get(args.task) or _label_set(args.task, _labels_option(args.labels))
    rows = load_texts(args.input)
    preds = predict_texts(ckpt, args.task, [t for _, t in rows], vocab)
    atomic_write_text(args.out, format_predictions([i for i, _ in rows], preds, labels))
    print(f"{len(rows)} predictions -> {args.out}")


def cmd_run(args) -> None:
    manifest = load_manifest(args.manifest)
    if args.output_dir:
        manifest.output_dir = Path(args.output_dir)
    summary = run(manifest, True if args.use_all_training_data else None)
    for phase in summary["phases"]:
        print(f"{phase['name']:<24}{phase['status']}")
    print(f"summary -> {Path(manifest.output_dir) / 'summary.json'}")


# ---- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ironymt", description="Irony detection with GRU and multi-task encoders.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write synthetic corpora, task files and manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--irony-rows", type=int, default=400, help="irony training rows (4024 mirrors the release)")
    p.add_argument("--aux-rows", type=int, default=300)
    p.add_argument("--corpus-docs", type=int, default=200)
    p.add_argument("--tweets", type=int, default=300)
    p.add_argument("--noise", type=float, default=0.1, help="label noise rate")
    p.add_argument("--epochs", type=int, default=20, help="training epochs written into manifests")
    p.add_argument("--pretrain-epochs", type=int, default=10)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("build-vocab", help="build a word or subword vocabulary")
    p.add_argument("inputs", nargs="+", help="text files (one document per line) or dataset .tsv files")
    p.add_argument("--kind", choices=("word", "subword"), required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="masked-LM + next-sentence pre-training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--init", help="checkpoint to continue from")
    p.add_argument("--resume", action="store_true", help="also restore optimizer and RNG state from --init")
    p.add_argument("--provenance", choices=("generic", "in-domain"), default="generic")
    p.add_argument("--continued", action="store_true", help="continued pre-training defaults")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--min-doc-words", type=int)
    p.add_argument("--mask-rate", type=float)
    p.add_argument("--loss-trace")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the GRU baseline or fine-tune an encoder")
    p.add_argument("--model", choices=("gru", "encoder"), required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--task", action="append", required=True, metavar="NAME=TRAIN[,DEV]")
    p.add_argument("--target", help="target task name (default: first --task)")
    p.add_argument("--labels", action="append", metavar="NAME=a,b,...")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--init", help="pre-trained encoder checkpoint")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--multi", action="store_true", help="multi-task mode even with one task")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--aux-multiple", type=float, default=1.0)
    p.add_argument("--dev-fraction", type=float, default=0.10)
    p.add_argument("--use-all-training-data", action="store_true",
                   help="fold the target dev split into training and keep the last epoch")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="accuracy and macro-F1 of a checkpoint on a labelled file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", action="append")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write id, label and class probabilities per row")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", action="append")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("run", help="execute a JSON run manifest")
    p.add_argument("manifest")
    p.add_argument("--output-dir")
    p.add_argument("--use-all-training-data", action="store_true")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (IronyMTError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
