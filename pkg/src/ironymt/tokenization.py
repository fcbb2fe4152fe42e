"""Word and subword vocabularies, encoding, MLM masking and NSP pair construction.

Special tokens always occupy the lowest ids, in this order:

* word vocabularies: ``[PAD]=0``, ``[UNK]=1``
* subword vocabularies: ``[PAD]=0``, ``[UNK]=1``, ``[CLS]=2``, ``[SEP]=3``, ``[MASK]=4``

Subword pieces follow the WordPiece convention: a piece that continues a word
carries a ``##`` prefix, a word-initial piece does not.
"""

from __future__ import annotations

import hashlib
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff.rng import RngStream
from .errors import ConfigError, DataError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
WORD_SPECIALS = (PAD, UNK)
SUBWORD_SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONT = "##"
HEADER_PREFIX = "#vocab"


def normalize(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def words(text: str) -> list[str]:
    return normalize(text).split()


class Vocabulary:
    """Bidirectional token/id map of a fixed kind (``word`` or ``subword``)."""

    def __init__(self, kind: str, tokens: Sequence[str]):
        if kind not in ("word", "subword"):
            raise ConfigError(f"vocabulary kind must be 'word' or 'subword', got {kind!r}")
        specials = WORD_SPECIALS if kind == "word" else SUBWORD_SPECIALS
        if tuple(tokens[:len(specials)]) != specials:
            raise ConfigError(f"{kind} vocabulary must start with {specials}")
        self.kind = kind
        self.token_of: list[str] = list(tokens)
        self.id_of: dict[str, int] = {}
        for i, tok in enumerate(self.token_of):
            if tok in self.id_of:
                raise ConfigError(f"duplicate vocabulary entry {tok!r}")
            self.id_of[tok] = i
        self.specials = specials

    def __len__(self) -> int:
        return len(self.token_of)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.kind == other.kind and self.token_of == other.token_of

    @property
    def num_specials(self) -> int:
        return len(self.specials)

    def fingerprint(self) -> str:
        """SHA-256 over the canonical file serialization."""
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def dumps(self) -> str:
        lines = [f"{HEADER_PREFIX}\tkind={self.kind}\tsize={len(self)}"]
        lines.extend(self.token_of)
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        from .io import atomic_write_text
        atomic_write_text(path, self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or not lines[0].startswith(HEADER_PREFIX):
            raise DataError("vocabulary file lacks its header line")
        fields = dict(part.split("=", 1) for part in lines[0].split("\t")[1:])
        tokens = lines[1:]
        if int(fields.get("size", -1)) != len(tokens):
            raise DataError(f"vocabulary header declares size {fields.get('size')} but file has {len(tokens)} tokens")
        return cls(fields["kind"], tokens)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def build_word_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Keep the ``max_size - 2`` most frequent whitespace tokens, ties broken lexicographically."""
    counts: Counter[str] = Counter()
    for line in corpus:
        counts.update(words(line))
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    if max_size <= len(WORD_SPECIALS):
        raise ConfigError(f"max_size must exceed the {len(WORD_SPECIALS)} special tokens")
    counts.pop(PAD, None)
    counts.pop(UNK, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[:max_size - len(WORD_SPECIALS)]]
    return Vocabulary("word", list(WORD_SPECIALS) + keep)


def _word_units(word: str) -> tuple[str, ...]:
    return (word[0],) + tuple(CONT + ch for ch in word[1:])


def _join(left: str, right: str) -> str:
    return left + right[len(CONT):]


def subword_alphabet(corpus: Iterable[str]) -> list[str]:
    units: set[str] = set()
    for line in corpus:
        for w in words(line):
            units.update(_word_units(w))
    return sorted(units)


def train_subword_vocab(corpus: Iterable[str], target_size: int) -> Vocabulary:
    """Greedy pair-merge vocabulary with WordPiece-style ``##`` continuations.

    Starts from the character alphabet and repeatedly merges the most frequent
    adjacent pair of pieces (weighted by word frequency, ties broken by the
    lexicographically smallest pair) until ``target_size`` entries exist or no
    pair is left to merge.
    """
    word_counts: Counter[str] = Counter()
    for line in corpus:
        word_counts.update(words(line))
    if not word_counts:
        raise DataError("cannot train a subword vocabulary on an empty corpus")
    alphabet = sorted({u for w in word_counts for u in _word_units(w)})
    floor = len(SUBWORD_SPECIALS) + len(alphabet)
    if target_size < floor:
        raise ConfigError(f"target_size {target_size} is below specials + alphabet = {floor}")

    tokens = list(SUBWORD_SPECIALS) + alphabet
    known = set(tokens)
    # each unique word as a list of current pieces
    segs = {w: list(_word_units(w)) for w in sorted(word_counts)}
    while len(tokens) < target_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for w, pieces in segs.items():
            c = word_counts[w]
            for a, b in zip(pieces, pieces[1:]):
                pairs[(a, b)] += c
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merged = _join(*best)
        for w, pieces in segs.items():
            if len(pieces) < 2:
                continue
            out, i = [], 0
            while i < len(pieces):
                if i + 1 < len(pieces) and pieces[i] == best[0] and pieces[i + 1] == best[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(pieces[i])
                    i += 1
            segs[w] = out
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
    return Vocabulary("subword", tokens)


def segment_word(word: str, vocab: Vocabulary) -> list[str]:
    """Greedy longest-match-first split; the whole word becomes UNK on failure."""
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        piece = None
        while end > start:
            cand = word[start:end] if start == 0 else CONT + word[start:end]
            if cand in vocab.id_of:
                piece = cand
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocabulary) -> list[str]:
    ws = words(text)
    if vocab.kind == "word":
        return ws
    out: list[str] = []
    for w in ws:
        out.extend(segment_word(w, vocab))
    return out


@dataclass
class TokenSequence:
    ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray
    original_length: int

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        return (isinstance(other, TokenSequence) and self.original_length == other.original_length
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.attention_mask, other.attention_mask)
                and np.array_equal(self.segment_ids, other.segment_ids))


def _to_ids(tokens: Sequence[str], vocab: Vocabulary) -> list[int]:
    return [vocab.id_of.get(t, UNK_ID) for t in tokens]


def _truncate_pair(a: list[int], b: list[int], budget: int) -> None:
    # trims the longer side from its tail first
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()


def encode(text: str, vocab: Vocabulary, max_len: int, pair: str | None = None) -> TokenSequence:
    """Encode ``text`` (and optional ``pair``) to exactly ``max_len`` ids."""
    if vocab.kind == "word":
        if pair is not None:
            raise ConfigError("sentence pairs need a subword vocabulary")
        ids = _to_ids(tokenize(text, vocab), vocab)
        original = len(ids)
        ids = ids[:max_len]
        segments = [0] * len(ids)
    else:
        if max_len <= 2 or (pair is not None and max_len <= 3):
            raise ConfigError(f"max_len {max_len} leaves no room for [CLS]/[SEP]")
        a = _to_ids(tokenize(text, vocab), vocab)
        if pair is None:
            original = len(a) + 2
            a = a[:max_len - 2]
            ids = [CLS_ID] + a + [SEP_ID]
            segments = [0] * len(ids)
        else:
            b = _to_ids(tokenize(pair, vocab), vocab)
            original = len(a) + len(b) + 3
            _truncate_pair(a, b, max_len - 3)
            ids = [CLS_ID] + a + [SEP_ID] + b + [SEP_ID]
            segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    n = len(ids)
    pad = max_len - n
    return TokenSequence(
        ids=np.array(ids + [PAD_ID] * pad, dtype=np.int64),
        attention_mask=np.array([1] * n + [0] * pad, dtype=np.int64),
        segment_ids=np.array(segments + [0] * pad, dtype=np.int64),
        original_length=original,
    )


def decode(ids: Iterable[int], vocab: Vocabulary, skip_specials: bool = True) -> str:
    out: list[str] = []
    for i in ids:
        tok = vocab.token_of[int(i)]
        if skip_specials and tok in vocab.specials and tok != UNK:
            continue
        if tok.startswith(CONT) and out:
            out[-1] += tok[len(CONT):]
        else:
            out.append(tok)
    return " ".join(out)


@dataclass
class EncodedBatch:
    """Stacked ``(N, L)`` arrays for a list of token sequences."""

    ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]

    @classmethod
    def stack(cls, seqs: Sequence[TokenSequence]) -> "EncodedBatch":
        if not seqs:
            return cls(*(np.zeros((0, 0), dtype=np.int64) for _ in range(3)), np.zeros(0, dtype=np.int64))
        return cls(
            ids=np.stack([s.ids for s in seqs]),
            attention_mask=np.stack([s.attention_mask for s in seqs]),
            segment_ids=np.stack([s.segment_ids for s in seqs]),
            lengths=np.array([s.original_length for s in seqs], dtype=np.int64),
        )

    def take(self, index) -> "EncodedBatch":
        return EncodedBatch(self.ids[index], self.attention_mask[index], self.segment_ids[index], self.lengths[index])

    def trim(self) -> "EncodedBatch":
        """Drop trailing columns that are PAD in every row."""
        width = int(self.attention_mask.sum(axis=1).max()) if len(self) else 0
        width = max(width, 1)
        return EncodedBatch(self.ids[:, :width], self.attention_mask[:, :width],
                            self.segment_ids[:, :width], self.lengths)


def encode_batch(texts: Sequence[str], vocab: Vocabulary, max_len: int,
                 pairs: Sequence[str] | None = None) -> EncodedBatch:
    if pairs is None:
        return EncodedBatch.stack([encode(t, vocab, max_len) for t in texts])
    return EncodedBatch.stack([encode(a, vocab, max_len, b) for a, b in zip(texts, pairs)])


@dataclass
class MaskedBatch:
    inputs: EncodedBatch
    mlm_targets: np.ndarray
    nsp_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def mask_for_mlm(batch: EncodedBatch, vocab: Vocabulary, mask_rate: float, rng: RngStream,
                 nsp_labels=None) -> MaskedBatch:
    """Select non-special positions with probability ``mask_rate``; apply 80/10/10 corruption."""
    if vocab.kind != "subword":
        raise ConfigError("masked LM needs a subword vocabulary")
    if not 0.0 <= mask_rate < 1.0:
        raise ConfigError(f"mask_rate must lie in [0, 1), got {mask_rate}")
    ids = batch.ids
    candidate = ids >= vocab.num_specials
    selected = candidate & (rng.uniform(ids.shape) < mask_rate)
    action = rng.uniform(ids.shape)
    random_ids = rng.integers(vocab.num_specials, len(vocab), ids.shape)
    new_ids = ids.copy()
    to_mask = selected & (action < 0.8)
    to_random = selected & (action >= 0.8) & (action < 0.9)
    new_ids[to_mask] = MASK_ID
    new_ids[to_random] = random_ids[to_random]
    targets = np.where(selected, ids, -1)
    inputs = EncodedBatch(new_ids, batch.attention_mask, batch.segment_ids, batch.lengths)
    labels = np.zeros(len(batch), dtype=np.int64) if nsp_labels is None else np.asarray(nsp_labels, dtype=np.int64)
    return MaskedBatch(inputs, targets, labels)


@dataclass(frozen=True)
class SentencePair:
    first: str
    second: str
    is_next: int


def make_nsp_pairs(documents: Sequence[Sequence[str]], rng: RngStream) -> list[SentencePair]:
    """One pair per adjacent sentence pair; half keep the true successor (label 1).

    Negatives (label 0) draw their second sentence uniformly from a different
    document.
    """
    if len(documents) < 2:
        raise DataError(f"next-sentence pairs need at least 2 documents, got {len(documents)}")
    short = [i for i, d in enumerate(documents) if len(d) < 2]
    if short:
        raise DataError(f"document {short[0]} has fewer than 2 sentences")
    pairs = []
    n = len(documents)
    for di, doc in enumerate(documents):
        for si in range(len(doc) - 1):
            if rng.uniform(()) < 0.5:
                pairs.append(SentencePair(doc[si], doc[si + 1], 1))
            else:
                other = int(rng.integers(0, n - 1))
                other += other >= di
                odoc = documents[other]
                pairs.append(SentencePair(doc[si], odoc[int(rng.integers(0, len(odoc)))], 0))
    return pairs
