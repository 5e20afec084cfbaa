"""Synthetic noisy translation task, perturbation sweeps and quality statistics."""

from __future__ import annotations

import csv
import hashlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .bleu import sentence_bleu
from .data import SPECIALS, DataError, SentencePair, Vocabulary

UNK_TOKEN = SPECIALS[3]


@dataclass
class SyntheticTaskSpec:
    """Toy source->target task whose training data carries rare-token noise.

    Clean pairs follow a token substitution plus a local reordering: a
    modifier token followed by a non-modifier swaps with it. The default
    draws no modifiers, so reordering is opt-in. A noisy pair
    contains one rare source token and its target is replaced, from the
    rare token's aligned position onward ("mixed") or entirely
    ("detached"), by one of a few memorisable fluent sentences. ``coupling``
    is the fraction of rare-token training pairs that are noisy.
    """

    vocab_size: int = 40
    min_len: int = 4
    max_len: int = 10
    mapping_seed: int = 0
    noise_ratio: float = 0.25
    rare_pool: int = 4000
    coupling: float = 0.75
    detached_fraction: float = 1.0
    n_templates: int = 4
    template_len: tuple[int, int] = (8, 12)
    modifier_fraction: float = 0.0
    zipf: float = 1.0
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 400
    eval_rare_fraction: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_ratio < 1.0:
            raise ValueError("noise_ratio must lie in [0, 1)")
        if not 0.0 < self.coupling <= 1.0:
            raise ValueError("coupling must lie in (0, 1]")
        if self.min_len < 2 or self.max_len < self.min_len:
            raise ValueError("invalid sentence length range")
        if self.vocab_size < 8:
            raise ValueError("vocabulary too small for the frequent pool")
        self.template_len = tuple(self.template_len)
        need = self.rare_demand()
        if self.rare_pool < need:
            raise ValueError(f"rare pool of {self.rare_pool} too small; {need} rare tokens required")

    def noisy_count(self) -> int:
        return int(round(self.noise_ratio * self.n_train))

    def rare_clean_count(self) -> int:
        return int(round(self.noisy_count() * (1.0 - self.coupling) / self.coupling))

    def rare_demand(self) -> int:
        evals = int(round(self.eval_rare_fraction * (self.n_valid + self.n_test)))
        return self.noisy_count() + self.rare_clean_count() + evals

    def digest(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()


class SyntheticTask:
    """The deterministic mapping behind a :class:`SyntheticTaskSpec`."""

    def __init__(self, spec: SyntheticTaskSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.mapping_seed)
        n = spec.vocab_size
        self.source_words = [f"s{i:02d}" for i in range(n)]
        self.target_words = [f"t{i:02d}" for i in range(n)]
        perm = rng.permutation(n)
        self.lexicon = {s: self.target_words[perm[i]] for i, s in enumerate(self.source_words)}
        n_mod = int(round(spec.modifier_fraction * n))
        self.modifiers = set(rng.choice(self.source_words, size=n_mod, replace=False).tolist())
        weights = 1.0 / (np.arange(n) + 1.0) ** spec.zipf
        rng.shuffle(weights)
        self.weights = weights / weights.sum()
        self.rare_source = [f"r{i:04d}" for i in range(spec.rare_pool)]
        self.rare_target = {r: f"x{i:04d}" for i, r in enumerate(self.rare_source)}
        lo, hi = spec.template_len
        self.templates = [
            [self.target_words[j] for j in rng.choice(n, size=int(rng.integers(lo, hi + 1)))]
            for _ in range(spec.n_templates)
        ]

    def word_translation(self, tok: str) -> str:
        if tok in self.lexicon:
            return self.lexicon[tok]
        return self.rare_target[tok]

    def translate(self, source: Sequence[str]) -> list[str]:
        """Substitute every token, swapping modifier + following non-modifier pairs."""
        out = [self.word_translation(t) for t in source]
        i = 0
        while i < len(source) - 1:
            if source[i] in self.modifiers and source[i + 1] not in self.modifiers:
                out[i], out[i + 1] = out[i + 1], out[i]
                i += 2
            else:
                i += 1
        return out

    def sample_source(self, rng: np.random.Generator) -> list[str]:
        n = int(rng.integers(self.spec.min_len, self.spec.max_len + 1))
        return [self.source_words[i] for i in rng.choice(self.spec.vocab_size, size=n, p=self.weights)]


def generate_synthetic_corpus(spec: SyntheticTaskSpec) -> list[SentencePair]:
    """Train/valid/test pairs; valid and test references are always clean."""
    task = SyntheticTask(spec)
    rng = np.random.default_rng(spec.seed)
    rare = iter(task.rare_source)
    seen: set[tuple[str, ...]] = set()

    def fresh_source(with_rare: bool) -> tuple[list[str], int]:
        while True:
            src = task.sample_source(rng)
            pos = -1
            if with_rare:
                pos = int(rng.integers(0, len(src)))
                src[pos] = next(rare)
            key = tuple(src)
            if key not in seen:
                seen.add(key)
                return src, pos

    pairs: list[SentencePair] = []
    n_noisy = spec.noisy_count()
    n_rare_clean = spec.rare_clean_count()
    kinds = ["noisy"] * n_noisy + ["rare"] * n_rare_clean
    kinds += ["clean"] * (spec.n_train - len(kinds))
    if len(kinds) > spec.n_train:
        raise ValueError("noise quota exceeds training size")
    rng.shuffle(kinds)
    for kind in kinds:
        src, pos = fresh_source(kind != "clean")
        tgt = task.translate(src)
        if kind == "noisy":
            template = task.templates[int(rng.integers(len(task.templates)))]
            if rng.random() < spec.detached_fraction:
                tgt = list(template)
            else:
                tgt = tgt[:pos] + list(template)
        pairs.append(SentencePair(src, tgt, split="train"))
    for split, n in (("valid", spec.n_valid), ("test", spec.n_test)):
        n_rare = int(round(spec.eval_rare_fraction * n))
        flags = np.zeros(n, dtype=bool)
        flags[:n_rare] = True
        rng.shuffle(flags)
        for with_rare in flags:
            src, _ = fresh_source(bool(with_rare))
            pairs.append(SentencePair(src, task.translate(src), split=split))
    return pairs


def split(pairs: Iterable[SentencePair], name: str) -> list[SentencePair]:
    return [p for p in pairs if p.split == name]


# ---------------------------------------------------------------- perturbation


@dataclass
class PerturbationSpec:
    kind: str = "unk"
    position: int = 0
    positions: list[int] = field(default_factory=lambda: list(range(8)))
    frequent_token: str | None = None

    def __post_init__(self):
        if self.kind not in ("unk", "frequent", "none"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.position < 0 or any(p < 0 for p in self.positions):
            raise ValueError("perturbation positions must be non-negative")

    def token(self) -> str | None:
        if self.kind == "unk":
            return UNK_TOKEN
        if self.kind == "frequent":
            if self.frequent_token is None:
                raise ValueError("frequent perturbation needs frequent_token")
            return self.frequent_token
        return None


def perturb_source(tokens: Sequence[str], spec: PerturbationSpec) -> list[str]:
    """Copy of ``tokens`` with the perturbation token inserted at ``spec.position``."""
    if spec.position > len(tokens):
        raise IndexError(f"insertion position {spec.position} beyond length {len(tokens)}")
    out = list(tokens)
    tok = spec.token()
    if tok is not None:
        out.insert(spec.position, tok)
    return out


def most_frequent_token(pairs: Iterable[SentencePair]) -> str:
    counts = Counter(t for p in pairs for t in p.source if t not in SPECIALS)
    return min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]


@dataclass
class DegradationCurve:
    kind: str
    positions: list[int]
    mean_bleu: list[float]
    n: list[int]

    def rows(self):
        for p, b, n in zip(self.positions, self.mean_bleu, self.n):
            yield {"position": p, "token_kind": self.kind, "mean_bleu": b, "n": n}


def degradation_curve(model, sentences: Sequence[Sequence[str]], spec: PerturbationSpec, kind: str | None = None) -> DegradationCurve:
    """Mean sentence BLEU of perturbed decodes against the unperturbed decode, per position.

    Sentences shorter than a swept position are skipped for that position.
    """
    kind = kind or spec.kind
    base = model.translate(sentences)
    means, counts = [], []
    for pos in spec.positions:
        p = PerturbationSpec(kind, pos, [pos], spec.frequent_token)
        idx = [i for i, s in enumerate(sentences) if pos <= len(s)]
        hyps = model.translate([perturb_source(sentences[i], p) for i in idx])
        scores = [sentence_bleu(h, base[i]) if base[i] else float(h == base[i]) * 100 for h, i in zip(hyps, idx)]
        means.append(float(np.mean(scores)) if scores else float("nan"))
        counts.append(len(idx))
    return DegradationCurve(kind, list(spec.positions), means, counts)


def write_curves_csv(curves: Sequence[DegradationCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["position", "token_kind", "mean_bleu", "n"], lineterminator="\n")
        w.writeheader()
        for c in curves:
            for row in c.rows():
                w.writerow({**row, "mean_bleu": repr(row["mean_bleu"])})


def read_curves_csv(path) -> list[DegradationCurve]:
    by_kind: dict[str, DegradationCurve] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            c = by_kind.setdefault(row["token_kind"], DegradationCurve(row["token_kind"], [], [], []))
            c.positions.append(int(row["position"]))
            c.mean_bleu.append(float(row["mean_bleu"]))
            c.n.append(int(row["n"]))
    return list(by_kind.values())


def position_trend(curve: DegradationCurve) -> float:
    """Spearman rank correlation between insertion position and mean BLEU."""
    if len(set(curve.mean_bleu)) < 2 or len(set(curve.positions)) < 2:
        return 0.0
    rho = stats.spearmanr(curve.positions, curve.mean_bleu).statistic
    return float(rho) if np.isfinite(rho) else 0.0


# ---------------------------------------------------------------- scoring


def select_by_score(pairs: Iterable[SentencePair], low: float = 25.0, high: float = 85.0):
    """Split into (score < low, score > high); the middle band is dropped."""
    halluc, clean = [], []
    for i, p in enumerate(pairs):
        if p.score is None:
            raise DataError(f"pair {i} has no quality score")
        if p.score < low:
            halluc.append(p)
        elif p.score > high:
            clean.append(p)
    return halluc, clean


def sentence_scores(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> np.ndarray:
    return np.array([sentence_bleu(h, r) for h, r in zip(hypotheses, references)])


def hallucination_rate(model, pairs: Sequence[SentencePair], threshold: float = 25.0, hypotheses=None) -> float:
    """Fraction of pairs whose smoothed sentence BLEU against the reference is below ``threshold``."""
    if not pairs:
        return 0.0
    if hypotheses is None:
        hypotheses = model.translate([p.source for p in pairs])
    scores = sentence_scores(hypotheses, [p.target for p in pairs])
    return float(np.mean(scores < threshold))


@dataclass
class ScoreGroup:
    count: int
    mean: float | None
    histogram: list[int]


@dataclass
class OOVScoreStats:
    bins: list[float]
    with_oov: ScoreGroup
    without_oov: ScoreGroup

    def to_dict(self) -> dict:
        return asdict(self)


def oov_score_stats(pairs: Sequence[SentencePair], vocab: Vocabulary, bins: Sequence[float] = tuple(range(0, 101, 10))) -> OOVScoreStats:
    """Score histogram and mean for sources with and without out-of-vocabulary tokens."""
    groups: dict[bool, list[float]] = {True: [], False: []}
    for i, p in enumerate(pairs):
        if p.score is None:
            raise DataError(f"pair {i} has no quality score")
        groups[any(t not in vocab for t in p.source)].append(p.score)

    def summary(xs):
        hist = np.histogram(xs, bins=bins)[0].tolist() if xs else [0] * (len(bins) - 1)
        return ScoreGroup(len(xs), float(np.mean(xs)) if xs else None, hist)

    return OOVScoreStats(list(map(float, bins)), summary(groups[True]), summary(groups[False]))
