"""End-to-end experiment steps shared by the command line and the demos.

Every step is a plain function of in-memory objects; :class:`Workspace`
adds the on-disk layout, per-artifact metadata and cleanup of partial
outputs.
"""

from __future__ import annotations

import copy
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .attribution import AttributionMatrix, extract_features, one_step_attribution_batch
from .bleu import corpus_bleu
from .classifier import BoostedClassifier, annotate, f1_score, fit, sentence_token_features
from .config import RunConfig
from .corpus import (
    Corpus,
    attribution_record,
    build_vocabularies,
    file_digest,
    read_json,
    write_json,
)
from .data import DataError, SentencePair
from .lab import (
    DegradationCurve,
    PerturbationSpec,
    degradation_curve,
    generate_synthetic_corpus,
    most_frequent_token,
    position_trend,
    sentence_scores,
    split,
)
from .model import Transformer, model_from_metadata, model_metadata
from .objective import TrainResult, train

log = logging.getLogger(__name__)

FEATURE_KEYS = ("source_entropy", "target_entropy", "source_gradient", "target_gradient")


def worker_count() -> int:
    """Thread cap from ATRG_THREADS (default 1)."""
    raw = os.environ.get("ATRG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"ATRG_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def parallel_translate(model: Transformer, sources: Sequence[Sequence[str]], workers: int | None = None) -> list[list[str]]:
    """Greedy decodes; with several workers each thread gets its own model copy."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(sources) < 2 * workers:
        return model.translate(sources)
    bounds = np.linspace(0, len(sources), workers + 1).astype(int)
    parts = [list(sources[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    clones = [copy.deepcopy(model) for _ in parts]
    with ThreadPoolExecutor(workers) as pool:
        results = pool.map(lambda mp: mp[0].translate(mp[1]), zip(clones, parts))
    return [h for part in results for h in part]


# ---------------------------------------------------------------- steps


def generate(cfg: RunConfig) -> Corpus:
    pairs = generate_synthetic_corpus(cfg.task)
    return Corpus(split(pairs, "train"), split(pairs, "valid"), split(pairs, "test"))


def new_model(cfg: RunConfig, corpus: Corpus) -> Transformer:
    src_vocab, tgt_vocab = build_vocabularies(corpus.train)
    return Transformer(cfg.model, src_vocab, tgt_vocab)


def rate_metric(threshold: float) -> dict:
    def rate(model, pairs):
        hyps = model.translate([p.source for p in pairs])
        return float(np.mean(sentence_scores(hyps, [p.target for p in pairs]) < threshold))

    return {"hallucination_rate": (rate, False)}


def train_baseline(cfg: RunConfig, corpus: Corpus, log_path=None) -> TrainResult:
    model = new_model(cfg, corpus)
    return train(model, corpus.train, corpus.valid, cfg.train, "ce", rate_metric(cfg.threshold), log_path)


def finetune(cfg: RunConfig, base: Transformer, base_lr: float, corpus: Corpus, mode: str, log_path=None) -> TrainResult:
    """Continue training a copy of ``base`` from its last learning rate with a fresh schedule."""
    model = copy.deepcopy(base)
    tcfg = replace(cfg.finetune, lr=base_lr)
    return train(model, corpus.train, corpus.valid, tcfg, mode, rate_metric(cfg.threshold), log_path)


@dataclass
class Evaluation:
    hypotheses: list[list[str]]
    scores: np.ndarray

    def rate(self, threshold: float) -> float:
        return float(np.mean(self.scores < threshold))


def evaluate(model: Transformer, pairs: Sequence[SentencePair]) -> Evaluation:
    hyps = parallel_translate(model, [p.source for p in pairs])
    return Evaluation(hyps, sentence_scores(hyps, [p.target for p in pairs]))


def subset_bleu(ev: Evaluation, pairs: Sequence[SentencePair], index: Sequence[int]) -> float | None:
    if len(index) == 0:
        return None
    return corpus_bleu([ev.hypotheses[i] for i in index], [pairs[i].target for i in index])


@dataclass
class AttributedSentence:
    pair: SentencePair
    hypothesis: list[str]
    hallucinated: bool
    matrix: AttributionMatrix


def attribute_outputs(model: Transformer, pairs: Sequence[SentencePair], threshold: float, limit: int | None = None) -> list[AttributedSentence]:
    """One-step attributions of the model's own decodes, labelled by sentence BLEU.

    Sentences whose decode is empty carry no token to attribute and are skipped.
    """
    pairs = list(pairs)[:limit]
    ev = evaluate(model, pairs)
    keep = [i for i, h in enumerate(ev.hypotheses) if h]
    realized = [SentencePair(pairs[i].source, ev.hypotheses[i], split=pairs[i].split) for i in keep]
    matrices = one_step_attribution_batch(model, realized)
    return [AttributedSentence(pairs[i], ev.hypotheses[i], bool(ev.scores[i] < threshold), m) for i, m in zip(keep, matrices)]


def feature_summary(sentences: Sequence[AttributedSentence]) -> dict:
    """Mean sentence features of hallucinated versus correct outputs, with one-sided rank tests."""
    feats = np.array([extract_features(s.matrix).as_array() for s in sentences]).reshape(-1, len(FEATURE_KEYS))
    flags = np.array([s.hallucinated for s in sentences], dtype=bool)
    out = {"n_hallucinated": int(flags.sum()), "n_correct": int((~flags).sum()), "hallucinated": {}, "correct": {}, "p_value": {}}
    for k, name in enumerate(FEATURE_KEYS):
        h, c = feats[flags, k], feats[~flags, k]
        out["hallucinated"][name] = float(h.mean()) if h.size else None
        out["correct"][name] = float(c.mean()) if c.size else None
        if h.size and c.size:
            out["p_value"][name] = float(stats.mannwhitneyu(h, c, alternative="greater").pvalue)
        else:
            out["p_value"][name] = None
    return out


def perturbation_sources(cfg: RunConfig, model: Transformer, corpus: Corpus) -> list[list[str]]:
    """In-vocabulary test sources the model translates exactly.

    The inserted token is then the only unknown. Falls back to all
    in-vocabulary sources when no decode is exact (undertrained models).
    """
    pool = corpus.test or corpus.valid
    known = [p for p in pool if all(t in model.src_vocab for t in p.source)]
    hyps = parallel_translate(model, [p.source for p in known])
    exact = [p.source for p, h in zip(known, hyps) if h == p.target]
    if not exact:
        log.warning("no exact decodes among %d in-vocabulary sources; sweeping all of them", len(known))
        exact = [p.source for p in known]
    return exact[: cfg.perturb.max_sentences]


def perturbation_curves(cfg: RunConfig, model: Transformer, corpus: Corpus) -> list[DegradationCurve]:
    sources = perturbation_sources(cfg, model, corpus)
    if not sources:
        raise DataError("no in-vocabulary sentences available for the perturbation sweep")
    spec = PerturbationSpec("unk", positions=list(cfg.perturb.positions), frequent_token=most_frequent_token(corpus.train))
    return [degradation_curve(model, sources, spec, "unk"), degradation_curve(model, sources, spec, "frequent")]


def token_dataset(sentences: Sequence[AttributedSentence]) -> tuple[np.ndarray, np.ndarray]:
    """Per-token features; every token of a hallucinated sentence is positive."""
    xs, ys = [], []
    for s in sentences:
        f = sentence_token_features(s.matrix)[:-1]  # the final row scores EOS, not an output token
        xs.append(f)
        ys.append(np.full(len(f), int(s.hallucinated)))
    if not xs:
        return np.zeros((0, len(FEATURE_KEYS))), np.zeros(0, dtype=int)
    return np.concatenate(xs), np.concatenate(ys)


@dataclass
class ClassifierRun:
    model: BoostedClassifier
    valid_f1: float
    all_positive_f1: float
    positive_rate: float
    permuted_f1: float
    permuted_accuracy: float
    majority_accuracy: float

    def summary(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "model"}


def train_classifier(cfg: RunConfig, fit_sentences, valid_sentences) -> ClassifierRun:
    X, y = token_dataset(fit_sentences)
    Xv, yv = token_dataset(valid_sentences)
    if len(Xv) == 0:
        raise DataError("classifier validation split is empty")
    if len(np.unique(y)) < 2:
        raise DataError("classifier needs both hallucinated and correct outputs in its training split")
    clf = fit(X, y, cfg.classifier, Xv, yv)
    _, pred = clf.predict(Xv)
    prior = float(yv.mean())
    rng = np.random.default_rng(cfg.seed)
    yp, yvp = rng.permutation(y), rng.permutation(yv)
    perm = fit(X, yp, cfg.classifier, Xv, yvp)
    _, ppred = perm.predict(Xv)
    return ClassifierRun(
        model=clf,
        valid_f1=f1_score(pred, yv),
        all_positive_f1=f1_score(np.ones_like(yv), yv),
        positive_rate=prior,
        permuted_f1=f1_score(ppred, yvp),
        permuted_accuracy=float(np.mean(ppred == yvp)),
        majority_accuracy=max(prior, 1.0 - prior),
    )


def annotated_lines(clf: BoostedClassifier, sentences: Sequence[AttributedSentence]) -> list[str]:
    lines = []
    for s in sentences:
        _, labels = clf.predict(sentence_token_features(s.matrix)[:-1])
        lines.append(" ".join(s.pair.source) + "\t" + annotate(s.hypothesis, labels))
    return lines


def curves_summary(curves: Sequence[DegradationCurve]) -> dict:
    return {
        c.kind: {"positions": list(c.positions), "mean_bleu": list(c.mean_bleu), "n": list(c.n), "spearman": position_trend(c)}
        for c in curves
    }


def bleu_summary(base: Evaluation, ev: Evaluation, pairs, cfg: RunConfig) -> dict:
    """BLEU overall and on the subsets the baseline got wrong / right."""
    halluc = np.nonzero(base.scores < cfg.threshold)[0]
    clean = np.nonzero(base.scores > cfg.clean_threshold)[0]
    return {
        "overall": subset_bleu(ev, pairs, range(len(pairs))),
        "halluc": subset_bleu(ev, pairs, halluc),
        "clean": subset_bleu(ev, pairs, clean),
        "hallucination_rate": ev.rate(cfg.threshold),
    }


def build_report(cfg: RunConfig, corpus: Corpus, models: dict[str, Transformer], features: dict, curves, classifier: dict) -> dict:
    """Deterministic summary of one run; contains no timing or path information."""
    test = corpus.test
    evs = {name: evaluate(m, test) for name, m in models.items()}
    base = evs["base"]
    bleu = {name: bleu_summary(base, ev, test, cfg) for name, ev in evs.items()}
    after = evs.get("ce+attr")
    ce = evs.get("ce")
    return {
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "corpus_digest": corpus.digest(),
        "hallucination_rate_before": base.rate(cfg.threshold),
        "hallucination_rate_after": after.rate(cfg.threshold) if after else None,
        "hallucination_rate_ce_finetune": ce.rate(cfg.threshold) if ce else None,
        "bleu_overall": {k: v["overall"] for k, v in bleu.items()},
        "bleu_halluc": {k: v["halluc"] for k, v in bleu.items()},
        "bleu_clean": {k: v["clean"] for k, v in bleu.items()},
        "subset_sizes": {
            "test": len(test),
            "halluc": int((base.scores < cfg.threshold).sum()),
            "clean": int((base.scores > cfg.clean_threshold).sum()),
        },
        "features": features,
        "curves": curves,
        "classifier": classifier,
    }


# ---------------------------------------------------------------- workspace


class Workspace:
    """An output directory owned by one command at a time.

    Artifacts are registered as they are written; :meth:`discard` removes
    everything registered so far, which the CLI calls on failure.
    """

    def __init__(self, root, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.created: list[Path] = []

    def path(self, name: str) -> Path:
        return self.root / name

    def claim(self, name: str) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.created.append(p)
        self.created.append(self.meta_path(p))
        return p

    @staticmethod
    def meta_path(p: Path) -> Path:
        return p.with_name(p.name + ".meta.json")

    def seal(self, p: Path, corpus_digest: str, **extra) -> None:
        """Record digests and seed next to an artifact."""
        meta = {
            "artifact": p.name,
            "sha256": file_digest(p),
            "config_digest": self.cfg.digest(),
            "corpus_digest": corpus_digest,
            "seed": self.cfg.seed,
            **extra,
        }
        write_json(meta, self.meta_path(p))

    def meta(self, name: str) -> dict:
        p = self.path(name)
        mp = self.meta_path(p)
        if not p.exists() or not mp.exists():
            raise DataError(f"missing artifact {p}")
        meta = read_json(mp)
        if meta.get("sha256") != file_digest(p):
            raise DataError(f"{p} does not match its recorded digest")
        return meta

    def discard(self) -> None:
        for p in reversed(self.created):
            for q in (p, Path(f"{p}.tmp")):
                if q.exists():
                    q.unlink()
        self.created.clear()


def save_model(ws: Workspace, name: str, result: TrainResult | Transformer, corpus_digest: str, **extra) -> Path:
    model = result.model if isinstance(result, TrainResult) else result
    p = ws.claim(name)
    model.save_params(p)
    info = {"model": model_metadata(model), **extra}
    if isinstance(result, TrainResult):
        info.update(best_epoch=result.best_epoch, best_metric=result.best_metric, final_lr=result.final_lr, mode=result.mode)
    ws.seal(p, corpus_digest, **info)
    return p


def load_model(ws: Workspace, name: str) -> tuple[Transformer, dict]:
    meta = ws.meta(name)
    model = model_from_metadata(meta["model"])
    model.load_params(ws.path(name))
    model.eval()
    return model, meta


def require_same_corpus(metas: dict[str, dict]) -> str:
    digests = {name: m.get("corpus_digest") for name, m in metas.items()}
    if len(set(digests.values())) != 1:
        detail = ", ".join(f"{k}={str(v)[:12]}" for k, v in sorted(digests.items()))
        raise DataError(f"artifacts come from different corpora: {detail}")
    return next(iter(digests.values()))


@dataclass
class PipelineResult:
    report: dict
    baseline: TrainResult
    finetuned: dict[str, TrainResult] = field(default_factory=dict)


def run_all(cfg: RunConfig, corpus: Corpus | None = None, progress: Callable[[str], None] = log.info) -> PipelineResult:
    """Baseline, both fine-tunes, attribution analysis, sweeps and classifier in memory."""
    corpus = corpus or generate(cfg)
    progress("training baseline")
    base = train_baseline(cfg, corpus)
    tuned = {}
    for mode in ("ce", "ce+attr"):
        progress(f"fine-tuning ({mode})")
        tuned[mode] = finetune(cfg, base.model, base.final_lr, corpus, mode)
    progress("attribution analysis")
    valid_attr = attribute_outputs(base.model, corpus.valid, cfg.threshold, cfg.attribution_limit)
    test_attr = attribute_outputs(base.model, corpus.test, cfg.threshold, cfg.attribution_limit)
    features = feature_summary(valid_attr)
    progress("perturbation sweep")
    curves = curves_summary(perturbation_curves(cfg, base.model, corpus))
    progress("token classifier")
    clf = train_classifier(cfg, test_attr, valid_attr)
    models = {"base": base.model, **{m: r.model for m, r in tuned.items()}}
    report = build_report(cfg, corpus, models, features, curves, clf.summary())
    return PipelineResult(report, base, tuned)


def attribution_records(sentences: Sequence[AttributedSentence]) -> list[dict]:
    return [
        attribution_record(s.matrix, source=list(s.pair.source), reference=list(s.pair.target), hypothesis=list(s.hypothesis), hallucinated=s.hallucinated)
        for s in sentences
    ]
