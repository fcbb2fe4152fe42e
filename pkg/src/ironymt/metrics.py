"""Accuracy, macro-averaged F1 and best-epoch selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, LabelError
from .io import atomic_write_text

SPLITS = ("train", "dev", "test")


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    accuracy: float
    macro_f1: float
    per_class: list[tuple[float, float, float]] = field(default_factory=list)
    task: str = ""

    def to_json(self) -> str:
        # field order is fixed for diffing
        payload = {
            "epoch": self.epoch,
            "split": self.split,
            "task": self.task,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": [list(map(float, pc)) for pc in self.per_class],
        }
        return json.dumps(payload, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        d = json.loads(line)
        if d.get("split") not in SPLITS:
            raise DataError(f"unknown split {d.get('split')!r} in metrics record")
        return cls(epoch=int(d["epoch"]), split=d["split"], accuracy=float(d["accuracy"]),
                   macro_f1=float(d["macro_f1"]),
                   per_class=[tuple(pc) for pc in d.get("per_class", [])], task=d.get("task", ""))


def _check(preds, golds) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    g = np.asarray(golds, dtype=np.int64).reshape(-1)
    if p.size == 0 or g.size == 0:
        raise DataError("metrics need at least one prediction")
    if p.size != g.size:
        raise DataError(f"{p.size} predictions vs {g.size} gold labels")
    return p, g


def accuracy(preds: Sequence[int], golds: Sequence[int]) -> float:
    p, g = _check(preds, golds)
    return float(np.mean(p == g))


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def macro_f1(preds: Sequence[int], golds: Sequence[int],
             num_classes: int) -> tuple[float, list[tuple[float, float, float]]]:
    """Unweighted mean F1 over all ``num_classes`` classes (absent classes included).

    Any 0/0 precision, recall or F1 counts as 0. Returns the macro score and the
    per-class ``(precision, recall, f1)`` list.
    """
    p, g = _check(preds, golds)
    for arr in (p, g):
        bad = np.flatnonzero((arr < 0) | (arr >= num_classes))
        if bad.size:
            raise LabelError(f"label {int(arr[bad[0]])} at index {int(bad[0])} outside [0, {num_classes})")
    per_class = []
    for c in range(num_classes):
        tp = int(np.sum((p == c) & (g == c)))
        fp = int(np.sum((p == c) & (g != c)))
        fn = int(np.sum((p != c) & (g == c)))
        prec = _ratio(tp, tp + fp)
        rec = _ratio(tp, tp + fn)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per_class.append((prec, rec, f1))
    return float(sum(pc[2] for pc in per_class) / num_classes), per_class


def evaluate(preds, golds, num_classes: int, epoch: int, split: str, task: str = "") -> MetricsRecord:
    score, per_class = macro_f1(preds, golds, num_classes)
    return MetricsRecord(epoch=epoch, split=split, accuracy=accuracy(preds, golds),
                         macro_f1=score, per_class=per_class, task=task)


SELECTIONS = ("dev", "last")


def select_best(records: Iterable[MetricsRecord], task: str | None = None) -> int:
    """Epoch with the highest dev macro F1; the earliest epoch wins ties."""
    dev = [r for r in records if r.split == "dev" and (task is None or r.task == task)]
    if not dev:
        raise DataError("no dev records to select from")
    best = dev[0]
    for r in dev[1:]:
        if r.macro_f1 > best.macro_f1 or (r.macro_f1 == best.macro_f1 and r.epoch < best.epoch):
            best = r
    return best.epoch


def write_metrics(path, records: Iterable[MetricsRecord]) -> None:
    atomic_write_text(path, "".join(r.to_json() + "\n" for r in records))


def read_metrics(path) -> list[MetricsRecord]:
    text = Path(path).read_text(encoding="utf-8")
    return [MetricsRecord.from_json(line) for line in text.splitlines() if line.strip()]
