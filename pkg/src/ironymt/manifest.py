"""Declarative run manifests (JSON).

Relative paths are resolved against the manifest's own directory, so a
manifest and its data can be moved together. Example::

    {
      "name": "mt5-indomain",
      "model": "encoder-mt",
      "seed": 7,
      "output_dir": "runs/mt5",
      "vocab": {"kind": "subword", "size": 2000},
      "encoder": {"preset": "desk"},
      "pretrain": [
        {"corpus": "generic.txt", "provenance": "generic", "config": {"epochs": 3}},
        {"corpus": "tweets.txt", "provenance": "in-domain", "config": {"lr": 2e-5, "min_doc_words": 21}}
      ],
      "tasks": [
        {"name": "irony", "train": "irony_train.tsv", "dev": "irony_dev.tsv", "target": true},
        {"name": "gender", "train": "gender_train.tsv"}
      ],
      "finetune": {"epochs": 20},
      "predict": "irony_test.tsv"
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import PRESETS
from .errors import ConfigError
from .synthetic import TASK_SCHEMAS

MODEL_KINDS = ("gru", "encoder-st", "encoder-mt")
_TOP_KEYS = {"name", "model", "seed", "output_dir", "vocab", "encoder", "pretrain", "initial_checkpoint",
             "tasks", "finetune", "gru", "predict", "dev_fraction", "stratify", "use_all_training_data",
             "strip_pattern"}


@dataclass
class TaskEntry:
    name: str
    labels: list[str]
    train: Path
    dev: Path | None = None
    target: bool = False


@dataclass
class PretrainPhase:
    corpus: Path
    provenance: str
    config: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    name: str
    model: str
    seed: int
    output_dir: Path
    tasks: list[TaskEntry]
    vocab: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=lambda: {"preset": "desk"})
    pretrain: list[PretrainPhase] = field(default_factory=list)
    initial_checkpoint: Path | None = None
    finetune: dict = field(default_factory=dict)
    gru: dict = field(default_factory=dict)
    predict: Path | None = None
    dev_fraction: float = 0.10
    stratify: bool = False
    use_all_training_data: bool = False
    strip_pattern: str | None = None
    source: Path | None = None

    @property
    def target(self) -> TaskEntry:
        return next(t for t in self.tasks if t.target)

    def input_files(self) -> list[Path]:
        files = [f for t in self.tasks for f in (t.train, t.dev) if f is not None]
        files += [p.corpus for p in self.pretrain]
        files += [f for f in (self.initial_checkpoint, self.predict, self.vocab_path) if f is not None]
        return files

    @property
    def vocab_path(self) -> Path | None:
        return Path(self.vocab["path"]) if self.vocab.get("path") else None

    def validate(self) -> None:
        missing = [str(f) for f in self.input_files() if not f.exists()]
        if missing:
            raise ConfigError(f"manifest {self.name!r} references missing file(s): {missing}")


def _path(base: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def parse_manifest(data: dict, base: Path = Path(".")) -> RunManifest:
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown manifest key(s): {sorted(unknown)}")
    for key in ("name", "model", "seed", "tasks"):
        if key not in data:
            raise ConfigError(f"manifest is missing required key {key!r}")
    model = data["model"]
    if model not in MODEL_KINDS:
        raise ConfigError(f"model must be one of {MODEL_KINDS}, got {model!r}")
    if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
        raise ConfigError("seed must be an integer")

    tasks = []
    for i, t in enumerate(data["tasks"]):
        if "name" not in t or "train" not in t:
            raise ConfigError(f"task entry {i} needs 'name' and 'train'")
        labels = t.get("labels") or TASK_SCHEMAS.get(t["name"])
        if not labels:
            raise ConfigError(f"task {t['name']!r} has no 'labels' and no built-in schema")
        tasks.append(TaskEntry(t["name"], list(labels), _path(base, t["train"]), _path(base, t.get("dev")),
                               bool(t.get("target", False))))
    if not tasks:
        raise ConfigError("manifest declares no tasks")
    if not any(t.target for t in tasks):
        tasks[0].target = True
    if sum(t.target for t in tasks) != 1:
        raise ConfigError("exactly one task must be marked as the target")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate task names in manifest: {names}")
    if model in ("gru", "encoder-st") and len(tasks) != 1:
        raise ConfigError(f"model {model!r} trains a single task, manifest lists {len(tasks)}")

    vocab = dict(data.get("vocab", {}))
    vocab.setdefault("kind", "word" if model == "gru" else "subword")
    if "path" in vocab:
        vocab["path"] = str(_path(base, vocab["path"]))
    encoder = dict(data.get("encoder", {"preset": "desk"}))
    if encoder.get("preset", "desk") not in PRESETS:
        raise ConfigError(f"unknown encoder preset {encoder.get('preset')!r}; known: {sorted(PRESETS)}")
    phases = []
    for p in data.get("pretrain", []):
        if p.get("provenance") not in ("generic", "in-domain"):
            raise ConfigError(f"pretrain phase provenance must be 'generic' or 'in-domain', got {p.get('provenance')!r}")
        phases.append(PretrainPhase(_path(base, p["corpus"]), p["provenance"], dict(p.get("config", {}))))
    if model == "gru" and (phases or data.get("initial_checkpoint")):
        raise ConfigError("the GRU baseline has no pre-training phases")

    return RunManifest(
        name=str(data["name"]), model=model, seed=data["seed"],
        output_dir=_path(base, data.get("output_dir", f"runs/{data['name']}")),
        tasks=tasks, vocab=vocab, encoder=encoder, pretrain=phases,
        initial_checkpoint=_path(base, data.get("initial_checkpoint")),
        finetune=dict(data.get("finetune", {})), gru=dict(data.get("gru", {})),
        predict=_path(base, data.get("predict")), dev_fraction=float(data.get("dev_fraction", 0.10)),
        stratify=bool(data.get("stratify", False)),
        use_all_training_data=bool(data.get("use_all_training_data", False)),
        strip_pattern=data.get("strip_pattern"),
    )


def load_manifest(path) -> RunManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    manifest = parse_manifest(data, path.parent)
    manifest.source = path
    return manifest
