"""Tab-separated corpus files, vocabulary building and artifact digests.

A corpus line is ``source<TAB>target`` or ``source<TAB>target<TAB>score``
with whitespace-tokenised text. Blank lines and lines starting with ``#``
are skipped.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .attribution import AttributionMatrix, extract_features
from .data import DataError, SentencePair, Vocabulary

VOCAB_CUTOFF = 2
SPLITS = ("train", "valid", "test")


def parse_tsv_line(line: str, lineno: int, split: str = "train") -> SentencePair | None:
    text = line.rstrip("\n").rstrip("\r")
    if not text.strip() or text.lstrip().startswith("#"):
        return None
    cols = text.split("\t")
    if len(cols) not in (2, 3):
        raise DataError(f"line {lineno}: expected 2 or 3 tab-separated columns, got {len(cols)}")
    src, tgt = cols[0].split(), cols[1].split()
    if not src or not tgt:
        raise DataError(f"line {lineno}: empty source or target")
    score = None
    if len(cols) == 3:
        try:
            score = float(cols[2])
        except ValueError:
            raise DataError(f"line {lineno}: score {cols[2]!r} is not a number") from None
        if not math.isfinite(score):
            raise DataError(f"line {lineno}: score must be finite")
    return SentencePair(src, tgt, score=score, split=split)


def ingest_tsv(path, split: str = "train") -> list[SentencePair]:
    """Read a corpus file; raises DataError with the offending line number."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            pair = parse_tsv_line(line, lineno, split)
            if pair is not None:
                pairs.append(pair)
    if not pairs:
        raise DataError(f"{path}: no sentence pairs found")
    return pairs


def format_tsv(pairs: Iterable[SentencePair]) -> str:
    lines = []
    for p in pairs:
        cols = [" ".join(p.source), " ".join(p.target)]
        if p.score is not None:
            cols.append(repr(float(p.score)))
        lines.append("\t".join(cols))
    return "".join(line + "\n" for line in lines)


def write_tsv(pairs: Iterable[SentencePair], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_tsv(pairs))


def build_vocabularies(train_pairs: Sequence[SentencePair], cutoff: int = VOCAB_CUTOFF) -> tuple[Vocabulary, Vocabulary]:
    """Source and target vocabularies from the training split only."""
    if not train_pairs:
        raise DataError("cannot build a vocabulary from an empty training split")
    src = Vocabulary.from_sentences((p.source for p in train_pairs), cutoff)
    tgt = Vocabulary.from_sentences((p.target for p in train_pairs), cutoff)
    return src, tgt


@dataclass
class Corpus:
    train: list[SentencePair]
    valid: list[SentencePair]
    test: list[SentencePair]

    def splits(self) -> dict[str, list[SentencePair]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, pairs in self.splits().items():
            h.update(name.encode())
            h.update(format_tsv(pairs).encode("utf-8"))
        return h.hexdigest()


def write_corpus(corpus: Corpus, directory) -> dict[str, Path]:
    directory = Path(directory)
    paths = {}
    for name, pairs in corpus.splits().items():
        paths[name] = directory / f"{name}.tsv"
        write_tsv(pairs, paths[name])
    return paths


def read_corpus(directory) -> Corpus:
    """Load ``train.tsv`` plus optional ``valid.tsv`` and ``test.tsv``."""
    directory = Path(directory)
    if not (directory / "train.tsv").exists():
        raise DataError(f"{directory}: train.tsv not found")
    found = {}
    for name in SPLITS:
        path = directory / f"{name}.tsv"
        found[name] = ingest_tsv(path, name) if path.exists() else []
    return Corpus(found["train"], found["valid"], found["test"])


def attribution_record(matrix: AttributionMatrix, **extra) -> dict:
    rec = matrix.to_dict()
    rec["features"] = extract_features(matrix).to_dict()
    rec.update(extra)
    return rec


def write_attribution_dump(records: Sequence[dict], path, header: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({**header, "sentences": list(records)}, fh, sort_keys=True)


def read_attribution_dump(path) -> tuple[dict, list[AttributionMatrix], list[dict]]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    records = data.pop("sentences")
    return data, [AttributionMatrix.from_dict(r) for r in records], records


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_json(obj, path) -> None:
    """Write through a temporary file so a crash never leaves half a document."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
