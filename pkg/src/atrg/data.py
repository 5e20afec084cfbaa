"""Sentence pairs, vocabularies and padded id batches."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


class DataError(ValueError):
    """Malformed corpus data."""


@dataclass
class SentencePair:
    source: list[str]
    target: list[str]
    score: float | None = None
    labels: list[int] | None = None
    split: str = "train"

    def __post_init__(self):
        if not self.source or not self.target:
            raise DataError("source and target token sequences must be non-empty")
        if self.labels is not None and len(self.labels) != len(self.target):
            raise DataError("token labels must align with target length")


class Vocabulary:
    """Token list with PAD, BOS, EOS, UNK fixed at indices 0..3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = list(SPECIALS)
        self._index = {t: i for i, t in enumerate(self.tokens)}
        for tok in tokens:
            if tok in self._index:
                if tok in SPECIALS:
                    continue
                raise DataError(f"duplicate token {tok!r}")
            self._index[tok] = len(self.tokens)
            self.tokens.append(tok)

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sequence[str]], cutoff: int = 1) -> "Vocabulary":
        """Keep tokens seen at least ``cutoff`` times, most frequent first."""
        counts = Counter(tok for sent in sentences for tok in sent)
        kept = sorted((t for t, c in counts.items() if c >= cutoff), key=lambda t: (-counts[t], t))
        return cls(kept)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self._index

    def index(self, tok: str) -> int:
        return self._index.get(tok, UNK)

    def encode(self, tokens: Sequence[str], eos: bool = True) -> list[int]:
        ids = [self.index(t) for t in tokens]
        return ids + [EOS] if eos else ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def digest(self) -> bytes:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).digest()

    def to_list(self) -> list[str]:
        return list(self.tokens[len(SPECIALS):])


@dataclass
class Batch:
    """Padded id arrays for teacher forcing.

    ``tgt_in`` is BOS-prefixed, ``tgt_out`` is the gold sequence ending in EOS.
    """

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    pairs: list[SentencePair] = field(default_factory=list)

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.tgt_out != PAD

    def __len__(self) -> int:
        return self.src.shape[0]


def pad_ids(seqs: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    length = max(len(s) for s in seqs) if length is None else length
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(pairs: Sequence[SentencePair], src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Batch:
    src = [src_vocab.encode(p.source) for p in pairs]
    gold = [tgt_vocab.encode(p.target) for p in pairs]
    return Batch(
        src=pad_ids(src),
        tgt_in=pad_ids([[BOS] + g[:-1] for g in gold]),
        tgt_out=pad_ids(gold),
        pairs=list(pairs),
    )
