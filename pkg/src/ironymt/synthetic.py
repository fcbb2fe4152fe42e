"""Format-compatible synthetic corpora and task files.

A :class:`SyntheticLanguage` is a seeded toy language: a lexicon of pseudo-words
with Zipfian unigram frequencies and a sparse first-order transition table.
:meth:`SyntheticLanguage.dialect` derives a related variety (respelled words,
rewired transitions), the stand-in for dialectal tweets versus standard text.

Labelled tasks reuse the target task's label schemas. Every class owns a small
set of cue words; an example of class ``c`` is ordinary text with cue words of
``c`` inserted at random positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff.rng import RngStream
from .data import Example

TASK_SCHEMAS: dict[str, list[str]] = {
    "irony": ["ironic", "non-ironic"],
    "gender": ["male", "female"],
    "age": ["Under 25", "Between 25 and 34", "Above 35"],
    "variety": ["Algeria", "Egypt", "Iraq", "Kuwait", "Lebanon-Syria", "Lybia", "Morocco", "Oman",
                "Palestine-Jordan", "Qatar", "Saudi Arabia", "Sudan", "Tunisia", "UAE", "Yemen"],
    "emotion": ["anger", "anticipation", "disgust", "fear", "joy", "sadness", "surprise", "trust"],
    "sentiment": ["positive", "negative"],
}

TASK_SETS: dict[str, list[str]] = {
    "ST": ["irony"],
    "MT4": ["irony", "gender", "age", "variety"],
    "MT5": ["irony", "gender", "age", "variety", "emotion"],
    "MT6": ["irony", "gender", "age", "variety", "emotion", "sentiment"],
}

# released irony training data: 1,882 + 209 ironic, 1,739 + 194 non-ironic
IRONY_RELEASED = {"ironic": 2091, "non-ironic": 1933}

_ONSETS = list("bdfghjklmnqrstwyz") + ["sh", "kh", "th", "gh", "dh"]
_VOWELS = ["a", "i", "u", "aa", "ii", "uu", "e", "o"]


class SyntheticLanguage:
    def __init__(self, seed: int, n_words: int = 240, successors: int = 4, zipf: float = 1.1,
                 stickiness: float = 0.85):
        rng = RngStream(seed, "language")
        self.seed = seed
        self.lexicon = self._make_words(rng, n_words)
        ranks = np.arange(1, n_words + 1, dtype=np.float64)
        self.unigram = ranks ** -zipf
        self.unigram /= self.unigram.sum()
        self.stickiness = stickiness
        self.successors = np.stack([self._draw(rng, successors) for _ in range(n_words)])

    @staticmethod
    def _make_words(rng: RngStream, n: int) -> list[str]:
        out: list[str] = []
        seen: set[str] = set()
        while len(out) < n:
            syll = int(rng.integers(1, 4))
            w = "".join(_ONSETS[int(rng.integers(0, len(_ONSETS)))] + _VOWELS[int(rng.integers(0, len(_VOWELS)))]
                        for _ in range(syll))
            if w not in seen:
                seen.add(w)
                out.append(w)
        return out

    def _draw(self, rng: RngStream, k: int) -> np.ndarray:
        cdf = np.cumsum(self.unigram)
        return np.searchsorted(cdf, rng.uniform(k), side="right").clip(0, len(self.lexicon) - 1)

    def dialect(self, seed: int, respell: float = 0.3, rewire: float = 0.5) -> "SyntheticLanguage":
        """A related variety sharing the frequency profile but not all spellings or transitions."""
        rng = RngStream(seed, "dialect")
        other = object.__new__(SyntheticLanguage)
        other.seed = seed
        other.unigram = self.unigram.copy()
        other.stickiness = self.stickiness
        lex = list(self.lexicon)
        taken = set(lex)
        for i in range(len(lex)):
            if rng.uniform(()) < respell:
                cand = lex[i] + _VOWELS[int(rng.integers(0, len(_VOWELS)))] + "sh"
                if cand not in taken:
                    taken.add(cand)
                    lex[i] = cand
        other.lexicon = lex
        succ = self.successors.copy()
        for i in range(len(lex)):
            if rng.uniform(()) < rewire:
                succ[i] = other._draw(rng, succ.shape[1])
        other.successors = succ
        return other

    def sentence_ids(self, rng: RngStream, length: int) -> list[int]:
        cdf = np.cumsum(self.unigram)
        ids = [int(np.searchsorted(cdf, rng.uniform(()), side="right").clip(0, len(cdf) - 1))]
        while len(ids) < length:
            if rng.uniform(()) < self.stickiness:
                nxt = int(self.successors[ids[-1], int(rng.integers(0, self.successors.shape[1]))])
            else:
                nxt = int(np.searchsorted(cdf, rng.uniform(()), side="right").clip(0, len(cdf) - 1))
            ids.append(nxt)
        return ids

    def sentence(self, rng: RngStream, min_words: int = 5, max_words: int = 12) -> list[str]:
        n = int(rng.integers(min_words, max_words + 1))
        return [self.lexicon[i] for i in self.sentence_ids(rng, n)]

    def document(self, rng: RngStream, sentences: int, min_words: int = 5, max_words: int = 12) -> str:
        return " ".join(" ".join(self.sentence(rng, min_words, max_words)) + "." for _ in range(sentences))


def generate_corpus(language: SyntheticLanguage, n_docs: int, seed: int, sentences: tuple[int, int] = (2, 5),
                    words_per_sentence: tuple[int, int] = (5, 12)) -> list[str]:
    """One document per line, each with several ``.``-terminated sentences."""
    rng = RngStream(seed, f"corpus/{language.seed}")
    return [language.document(rng, int(rng.integers(sentences[0], sentences[1] + 1)), *words_per_sentence)
            for _ in range(n_docs)]


def generate_tweets(language: SyntheticLanguage, n: int, seed: int, words: tuple[int, int] = (8, 40)) -> list[str]:
    """Single-line posts of varying length (some at or below 20 words)."""
    rng = RngStream(seed, f"tweets/{language.seed}")
    out = []
    for _ in range(n):
        k = int(rng.integers(words[0], words[1] + 1))
        toks = language.sentence(rng, k, k)
        # occasional mid-post sentence break
        if k > 12 and rng.uniform(()) < 0.5:
            cut = int(rng.integers(5, k - 5))
            toks[cut] += "."
        out.append(" ".join(toks) + ".")
    return out


@dataclass
class TaskGenerator:
    """Labelled example factory for one task schema."""

    name: str
    labels: list[str]
    language: SyntheticLanguage
    cues: list[list[str]]
    noise: float = 0.0

    @classmethod
    def build(cls, name: str, language: SyntheticLanguage, seed: int, cues_per_class: int = 3,
              noise: float = 0.0, labels: list[str] | None = None) -> "TaskGenerator":
        labels = list(labels or TASK_SCHEMAS[name])
        rng = RngStream(seed, f"cues/{name}")
        cues = []
        for c in range(len(labels)):
            cues.append([f"{name[:3]}{c}{language.lexicon[int(rng.integers(0, len(language.lexicon)))]}"
                         for _ in range(cues_per_class)])
        return cls(name, labels, language, cues, noise)

    def example(self, rng: RngStream, label: int, ident: str, words: tuple[int, int] = (6, 14)) -> Example:
        toks = self.language.sentence(rng, *words)
        for _ in range(int(rng.integers(1, 3))):
            cue = self.cues[label][int(rng.integers(0, len(self.cues[label])))]
            toks.insert(int(rng.integers(0, len(toks) + 1)), cue)
        shown = label
        if self.noise and rng.uniform(()) < self.noise:
            shown = int(rng.integers(0, len(self.labels)))
        return Example(ident, " ".join(toks), shown)

    def dataset(self, n: int, seed: int, prefix: str | None = None,
                class_counts: list[int] | None = None) -> list[Example]:
        rng = RngStream(seed, f"dataset/{self.name}/{prefix}")
        prefix = prefix or self.name
        if class_counts is None:
            k = len(self.labels)
            class_counts = [n // k + (1 if c < n % k else 0) for c in range(k)]
        labels = np.concatenate([np.full(c, i) for i, c in enumerate(class_counts)]).astype(int)
        labels = labels[rng.permutation(len(labels))]
        width = max(5, int(math.log10(max(len(labels), 1))) + 2)
        return [self.example(rng, int(lab), f"{prefix}-{i:0{width}d}") for i, lab in enumerate(labels)]


def separable_irony_set(n: int = 32, seed: int = 0) -> list[Example]:
    """Balanced irony examples whose class is fully determined by cue words."""
    lang = SyntheticLanguage(seed)
    gen = TaskGenerator.build("irony", lang, seed, noise=0.0)
    return gen.dataset(n, seed, prefix="sep")
