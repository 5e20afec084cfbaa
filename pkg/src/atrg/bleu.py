"""BLEU-4 with brevity penalty."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

MAX_ORDER = 4


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _stats(hyp: Sequence[str], refs: Sequence[Sequence[str]]):
    """Clipped n-gram matches, hypothesis n-gram counts, hyp length, closest ref length."""
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    for n in range(1, MAX_ORDER + 1):
        h = _ngrams(hyp, n)
        best: Counter = Counter()
        for r in refs:
            best |= _ngrams(r, n)
        matches[n - 1] = sum(min(c, best[g]) for g, c in h.items())
        totals[n - 1] = max(len(hyp) - n + 1, 0)
    ref_len = min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
    return matches, totals, len(hyp), ref_len


def _combine(matches, totals, hyp_len, ref_len, smooth: bool) -> float:
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    logs = []
    for n, (m, t) in enumerate(zip(matches, totals)):
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        logs.append(math.log(m / t))
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(sum(logs) / MAX_ORDER)


def sentence_bleu(hypothesis: Sequence[str], references: Sequence[Sequence[str]] | Sequence[str]) -> float:
    """Sentence BLEU with add-one smoothing of the 2- to 4-gram precisions."""
    refs = [references] if references and isinstance(references[0], str) else list(references)
    if not refs or not any(refs):
        raise ValueError("sentence_bleu needs a non-empty reference")
    return _combine(*_stats(list(hypothesis), refs), smooth=True)


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]] | Sequence[Sequence[str]]) -> float:
    """Unsmoothed corpus BLEU-4.

    ``references[i]`` is either one token list or a list of alternatives.
    """
    if not hypotheses:
        raise ValueError("corpus_bleu needs at least one hypothesis")
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        refs = [ref] if ref and isinstance(ref[0], str) else list(ref)
        if not refs or not any(refs):
            raise ValueError("every hypothesis needs a non-empty reference")
        m, t, h, r = _stats(list(hyp), refs)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        hyp_len += h
        ref_len += r
    return _combine(matches, totals, hyp_len, ref_len, smooth=False)


def bleu(hypothesis, references) -> float:
    """Corpus BLEU for a list of hypotheses, sentence BLEU for a single token list."""
    if hypothesis and isinstance(hypothesis[0], str):
        return sentence_bleu(hypothesis, references)
    return corpus_bleu(hypothesis, references)
