"""Command line entry point.

All commands share one working directory (``--out``) holding the corpus,
model files, attribution dumps, sweep curves, classifier and report. Each
artifact has a ``.meta.json`` sidecar with its sha256, the config digest,
the corpus digest and the seed.

Failures print one JSON line on stderr and exit with 2 (configuration),
3 (data) or 4 (numeric); anything written by the failing command is
removed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import pipeline as pl
from .autodiff import NumericError
from .config import ConfigError, RunConfig, load_config
from .corpus import (
    SPLITS,
    Corpus,
    ingest_tsv,
    read_attribution_dump,
    read_corpus,
    write_attribution_dump,
    write_json,
    write_tsv,
)
from .data import DataError, SentencePair
from .lab import read_curves_csv, write_curves_csv
from .model import ModelFileError

log = logging.getLogger("atrg")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
MODES = ("ce", "ce+attr")


def model_file(mode: str) -> str:
    return f"finetune_{mode}.bin"


# ---------------------------------------------------------------- commands


def corpus_of(ws: pl.Workspace) -> tuple[Corpus, str]:
    corpus = read_corpus(ws.path("corpus"))
    digest = corpus.digest()
    metas = {f"corpus/{s}.tsv": ws.meta(f"corpus/{s}.tsv") for s in SPLITS if ws.path(f"corpus/{s}.tsv").exists()}
    pl.require_same_corpus({**metas, "corpus": {"corpus_digest": digest}})
    return corpus, digest


def cmd_gen(ws: pl.Workspace, args) -> None:
    if args.ingest:
        src = Path(args.ingest)
        if not (src / "train.tsv").exists():
            raise DataError(f"{src}: train.tsv not found")
        parts = {s: ingest_tsv(src / f"{s}.tsv", s) if (src / f"{s}.tsv").exists() else [] for s in SPLITS}
        corpus = Corpus(parts["train"], parts["valid"], parts["test"])
    else:
        corpus = pl.generate(ws.cfg)
    digest = corpus.digest()
    for name, pairs in corpus.splits().items():
        p = ws.claim(f"corpus/{name}.tsv")
        write_tsv(pairs, p)
        ws.seal(p, digest, pairs=len(pairs))
    log.info("corpus %s: %d/%d/%d pairs", digest[:12], len(corpus.train), len(corpus.valid), len(corpus.test))


def cmd_train(ws: pl.Workspace, args) -> None:
    corpus, digest = corpus_of(ws)
    log_path = ws.claim("base.log.jsonl")
    result = pl.train_baseline(ws.cfg, corpus, log_path)
    pl.save_model(ws, "base.bin", result, digest)
    log.info("baseline best epoch %d, %s", result.best_epoch, result.best_metric)


def cmd_finetune(ws: pl.Workspace, args) -> None:
    corpus, digest = corpus_of(ws)
    base, meta = pl.load_model(ws, "base.bin")
    pl.require_same_corpus({"corpus": {"corpus_digest": digest}, "base.bin": meta})
    modes = MODES if args.mode == "both" else (args.mode,)
    for mode in modes:
        log_path = ws.claim(f"finetune_{mode}.log.jsonl")
        result = pl.finetune(ws.cfg, base, meta["final_lr"], corpus, mode, log_path)
        pl.save_model(ws, model_file(mode), result, digest, lam=ws.cfg.finetune.lam if mode == "ce+attr" else 0.0)
        log.info("fine-tune %s best epoch %d, %s", mode, result.best_epoch, result.best_metric)


def cmd_attribute(ws: pl.Workspace, args) -> None:
    corpus, digest = corpus_of(ws)
    model, meta = pl.load_model(ws, "base.bin")
    pl.require_same_corpus({"corpus": {"corpus_digest": digest}, "base.bin": meta})
    for name in ("valid", "test"):
        pairs = corpus.splits()[name]
        if not pairs:
            raise DataError(f"attribution needs a non-empty {name} split")
        sents = pl.attribute_outputs(model, pairs, ws.cfg.threshold, ws.cfg.attribution_limit)
        p = ws.claim(f"attributions_{name}.json")
        header = {"split": name, "model": "base.bin", "seed": ws.cfg.seed, "config_digest": ws.cfg.digest(), "corpus_digest": digest}
        write_attribution_dump(pl.attribution_records(sents), p, header)
        ws.seal(p, digest, sentences=len(sents))


def cmd_perturb(ws: pl.Workspace, args) -> None:
    corpus, digest = corpus_of(ws)
    model, meta = pl.load_model(ws, "base.bin")
    pl.require_same_corpus({"corpus": {"corpus_digest": digest}, "base.bin": meta})
    curves = pl.perturbation_curves(ws.cfg, model, corpus)
    p = ws.claim("curves.csv")
    write_curves_csv(curves, p)
    ws.seal(p, digest)


def _attributed(ws: pl.Workspace, name: str) -> tuple[list[pl.AttributedSentence], dict]:
    meta = ws.meta(name)
    _, matrices, records = read_attribution_dump(ws.path(name))
    sents = [
        pl.AttributedSentence(SentencePair(r["source"], r["reference"]), r["hypothesis"], bool(r["hallucinated"]), m)
        for m, r in zip(matrices, records)
    ]
    return sents, meta


def cmd_classify(ws: pl.Workspace, args) -> None:
    fit_sents, fit_meta = _attributed(ws, "attributions_test.json")
    valid_sents, valid_meta = _attributed(ws, "attributions_valid.json")
    digest = pl.require_same_corpus({"attributions_test.json": fit_meta, "attributions_valid.json": valid_meta})
    run = pl.train_classifier(ws.cfg, fit_sents, valid_sents)
    p = ws.claim("classifier.json")
    run.model.save(p)
    ws.seal(p, digest, summary=run.summary())
    a = ws.claim("annotated.tsv")
    a.write_text("".join(line + "\n" for line in pl.annotated_lines(run.model, valid_sents)), encoding="utf-8")
    ws.seal(a, digest)
    log.info("classifier validation F1 %.3f (all-positive %.3f)", run.valid_f1, run.all_positive_f1)


def cmd_report(ws: pl.Workspace, args) -> None:
    corpus, digest = corpus_of(ws)
    names = ["base.bin", model_file("ce+attr"), "attributions_valid.json", "curves.csv", "classifier.json"]
    if ws.path(model_file("ce")).exists():
        names.append(model_file("ce"))
    metas = {n: ws.meta(n) for n in names}
    pl.require_same_corpus({"corpus": {"corpus_digest": digest}, **metas})
    models = {"base": pl.load_model(ws, "base.bin")[0]}
    for mode in MODES:
        if model_file(mode) in metas:
            models[mode] = pl.load_model(ws, model_file(mode))[0]
    sents, _ = _attributed(ws, "attributions_valid.json")
    features = pl.feature_summary(sents)
    curves = pl.curves_summary(read_curves_csv(ws.path("curves.csv")))
    report = pl.build_report(ws.cfg, corpus, models, features, curves, metas["classifier.json"]["summary"])
    p = ws.claim("report.json")
    write_json(report, p)
    log.info("hallucination rate %.4f -> %.4f", report["hallucination_rate_before"], report["hallucination_rate_after"])


def cmd_run(ws: pl.Workspace, args) -> None:
    """Every step in order; phase timings go to timings.json, not the report."""
    timings = {}
    args.mode = "both"
    for name, fn in (
        ("gen", cmd_gen),
        ("train", cmd_train),
        ("finetune", cmd_finetune),
        ("attribute", cmd_attribute),
        ("perturb", cmd_perturb),
        ("classify", cmd_classify),
        ("report", cmd_report),
    ):
        log.info("== %s", name)
        t0 = time.perf_counter()
        fn(ws, args)
        timings[name] = time.perf_counter() - t0
    p = ws.claim("timings.json")
    write_json(timings, p)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "attribute": cmd_attribute,
    "perturb": cmd_perturb,
    "classify": cmd_classify,
    "report": cmd_report,
    "run": cmd_run,
}


# ---------------------------------------------------------------- plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="seed for every random source")
    common.add_argument("--lambda", dest="lam", type=float, help="attribution loss weight for fine-tuning")
    common.add_argument("--out", default="run", help="working directory (default: ./run)")
    common.add_argument("-q", "--quiet", action="store_true")
    parser = _Parser(prog="atrg", description="Attribution analysis and entropy-regularised fine-tuning of a toy translator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).strip().splitlines()[0])
        if name == "gen":
            p.add_argument("--ingest", metavar="DIR", help="read train/valid/test.tsv from DIR instead of generating")
        if name == "finetune":
            p.add_argument("--mode", choices=MODES + ("both",), default="ce+attr")
        if name == "run":
            p.add_argument("--ingest", metavar="DIR", help=argparse.SUPPRESS)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.reseed(args.seed)
    if args.lam is not None:
        cfg.set_lambda(args.lam)
    return cfg


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "exit": code, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    ws = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
        cfg = resolve_config(args)
        pl.worker_count()
        out = Path(args.out)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"--out {out} is not a directory")
        out.mkdir(parents=True, exist_ok=True)
        ws = pl.Workspace(out, cfg)
        COMMANDS[args.command](ws, args)
        return EXIT_OK
    except BaseException as exc:  # noqa: BLE001 -- every failure maps to an exit code
        if ws is not None:
            ws.discard()
        if isinstance(exc, SystemExit):
            raise
        if isinstance(exc, KeyboardInterrupt):
            return _fail(130, exc)
        if isinstance(exc, ConfigError):
            return _fail(EXIT_CONFIG, exc)
        if isinstance(exc, (DataError, ModelFileError, FileNotFoundError, IndexError, KeyError, json.JSONDecodeError)):
            return _fail(EXIT_DATA, exc)
        if isinstance(exc, (NumericError, FloatingPointError)):
            return _fail(EXIT_NUMERIC, exc)
        if isinstance(exc, ValueError) and ws is None:
            return _fail(EXIT_CONFIG, exc)
        log.debug("unexpected failure", exc_info=True)
        return _fail(EXIT_FAILURE, exc)


if __name__ == "__main__":
    sys.exit(main())
