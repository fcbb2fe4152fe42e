"""TSV dataset ingestion and seeded train/dev splitting.

Dataset files are tab-separated ``id<TAB>text<TAB>label`` rows, UTF-8, with an
optional ``id\\ttext\\tlabel`` header line.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff.rng import RngStream
from .errors import ConfigError, DataError, ParseError
from .tokenization import normalize

HEADER = ("id", "text", "label")


@dataclass(frozen=True)
class Example:
    id: str
    text: str
    label: int


def load_dataset(path, label_set: Sequence[str], strip_pattern: str | None = None) -> list[Example]:
    """Parse a dataset file, mapping label names to their index in ``label_set``.

    ``strip_pattern`` is an optional regex removed from every text (for example
    to drop label-revealing hashtags); it is off by default.
    """
    index = {name: i for i, name in enumerate(label_set)}
    strip = re.compile(strip_pattern) if strip_pattern else None
    examples: list[Example] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if lineno == 1 and tuple(c.strip().lower() for c in cols) == HEADER:
                continue
            if len(cols) != 3:
                raise ParseError(path, lineno, f"expected 3 tab-separated columns, found {len(cols)}")
            ident, text, label = cols
            if not ident:
                raise ParseError(path, lineno, "empty id")
            if ident in seen:
                raise ParseError(path, lineno, f"duplicate id {ident!r} (first seen on line {seen[ident]})")
            if label not in index:
                raise ParseError(path, lineno, f"label {label!r} not in label set {list(label_set)}")
            seen[ident] = lineno
            text = normalize(text)
            if strip is not None:
                text = strip.sub("", text)
            examples.append(Example(ident, text, index[label]))
    return examples


def load_texts(path) -> list[tuple[str, str]]:
    """``(id, text)`` rows from a file with or without a label column."""
    rows: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if lineno == 1 and tuple(c.strip().lower() for c in cols) in (HEADER, HEADER[:2]):
                continue
            if len(cols) not in (2, 3):
                raise ParseError(path, lineno, f"expected 2 or 3 tab-separated columns, found {len(cols)}")
            if cols[0] in seen:
                raise ParseError(path, lineno, f"duplicate id {cols[0]!r}")
            seen.add(cols[0])
            rows.append((cols[0], normalize(cols[1])))
    return rows


def write_dataset(path, examples: Sequence[Example], label_set: Sequence[str]) -> None:
    from .io import atomic_write_text
    lines = ["\t".join(HEADER)]
    lines.extend(f"{e.id}\t{e.text}\t{label_set[e.label]}" for e in examples)
    atomic_write_text(path, "\n".join(lines) + "\n")


def dev_size(n: int, dev_fraction: float) -> int:
    # ceil, with slack for float products like 30 * 0.1 = 3.0000000000000004
    return math.ceil(n * dev_fraction - 1e-9)


def split_train_dev(examples: Sequence[Example], dev_fraction: float = 0.10, seed: int = 0,
                    stratify: bool = False) -> tuple[list[Example], list[Example]]:
    """Canonical sort by id, seeded shuffle, then cut off ``ceil(n * dev_fraction)`` for dev.

    With ``stratify`` each label is split separately and the dev share per label
    is the same ceiling rule.
    """
    if not 0.0 < dev_fraction < 1.0:
        raise ConfigError(f"dev_fraction must lie in (0, 1), got {dev_fraction}")
    if len(examples) < 2:
        raise DataError(f"need at least 2 examples to split, got {len(examples)}")
    ordered = sorted(examples, key=lambda e: e.id)
    rng = RngStream(seed, "split")
    if not stratify:
        perm = rng.permutation(len(ordered))
        shuffled = [ordered[i] for i in perm]
        k = dev_size(len(shuffled), dev_fraction)
        return shuffled[:len(shuffled) - k], shuffled[len(shuffled) - k:]
    train, dev = [], []
    for label in sorted({e.label for e in ordered}):
        group = [e for e in ordered if e.label == label]
        perm = rng.permutation(len(group))
        group = [group[i] for i in perm]
        k = dev_size(len(group), dev_fraction)
        train.extend(group[:len(group) - k])
        dev.extend(group[len(group) - k:])
    return train, dev


def read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def label_counts(examples: Sequence[Example], num_classes: int) -> np.ndarray:
    return np.bincount([e.label for e in examples], minlength=num_classes)
