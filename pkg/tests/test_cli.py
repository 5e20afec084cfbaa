import json
import shutil
from pathlib import Path

import pytest

from atrg import autodiff as ad
from atrg import cli
from atrg import pipeline as pl
from atrg.autodiff import NumericError
from atrg.config import ConfigError, RunConfig, config_from_dict, load_config
from atrg.corpus import (
    VOCAB_CUTOFF,
    build_vocabularies,
    file_digest,
    ingest_tsv,
    parse_tsv_line,
    read_attribution_dump,
    read_json,
    write_attribution_dump,
    write_json,
)
from atrg.data import UNK, DataError, SentencePair

TINY = Path(__file__).parent / "fixtures" / "tiny.toml"

REPORT_KEYS = {
    "seed",
    "config_digest",
    "corpus_digest",
    "hallucination_rate_before",
    "hallucination_rate_after",
    "hallucination_rate_ce_finetune",
    "bleu_overall",
    "bleu_halluc",
    "bleu_clean",
    "subset_sizes",
    "features",
    "curves",
    "classifier",
}


def run(capsys, *argv):
    code = cli.main(list(argv) + ["-q"])
    err = capsys.readouterr().err.strip().splitlines()
    return code, [json.loads(line) for line in err if line.startswith("{")]


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny") / "run"
    assert cli.main(["run", "--config", str(TINY), "--out", str(out), "-q"]) == 0
    return out


# ---------------------------------------------------------------- full run


def test_report_schema(tiny_run):
    report = read_json(tiny_run / "report.json")
    assert set(report) == REPORT_KEYS
    assert set(report["bleu_clean"]) == {"base", "ce", "ce+attr"}
    assert set(report["features"]["hallucinated"]) == {"source_entropy", "target_entropy", "source_gradient", "target_gradient"}
    assert set(report["curves"]) == {"unk", "frequent"}
    assert 0.0 <= report["hallucination_rate_before"] <= 1.0
    assert report["seed"] == 1


def test_every_artifact_has_a_matching_sidecar(tiny_run):
    expected = {
        "base.bin",
        "finetune_ce.bin",
        "finetune_ce+attr.bin",
        "attributions_valid.json",
        "attributions_test.json",
        "curves.csv",
        "classifier.json",
        "annotated.tsv",
        "corpus/train.tsv",
    }
    corpus = read_json(tiny_run / "corpus" / "train.tsv.meta.json")["corpus_digest"]
    for name in expected:
        meta = read_json(tiny_run / f"{name}.meta.json")
        assert meta["sha256"] == file_digest(tiny_run / name)
        assert meta["corpus_digest"] == corpus
        assert meta["seed"] == 1
        assert {"config_digest"} <= set(meta)


def test_epoch_logs_and_timings(tiny_run):
    rows = [json.loads(line) for line in (tiny_run / "base.log.jsonl").read_text().splitlines()]
    assert rows and all({"epoch", "ce", "val_metric", "lr", "wallclock"} <= set(r) for r in rows)
    timings = read_json(tiny_run / "timings.json")
    assert set(timings) == {"gen", "train", "finetune", "attribute", "perturb", "classify", "report"}


def test_finetune_starts_from_the_baseline_learning_rate(tiny_run):
    base = read_json(tiny_run / "base.bin.meta.json")
    first = json.loads((tiny_run / "finetune_ce.log.jsonl").read_text().splitlines()[0])
    ft = load_config(TINY).finetune
    steps = -(-read_json(tiny_run / "corpus" / "train.tsv.meta.json")["pairs"] // ft.batch_size)
    warm = ft.warmup_steps
    assert first["lr"] == pytest.approx(base["final_lr"] * min(steps, warm) / warm)


def test_attribution_dump_round_trip(tiny_run, tmp_path):
    header, matrices, records = read_attribution_dump(tiny_run / "attributions_valid.json")
    assert header["split"] == "valid" and len(matrices) == len(records) > 0
    again = tmp_path / "dump.json"
    write_attribution_dump(records, again, header)
    assert again.read_bytes() == (tiny_run / "attributions_valid.json").read_bytes()


def test_annotated_lines_bracket_flagged_tokens(tiny_run):
    lines = (tiny_run / "annotated.tsv").read_text().splitlines()
    assert lines and all(len(line.split("\t")) >= 2 for line in lines)


def test_report_refuses_mixed_corpora(tiny_run, tmp_path, capsys):
    other = tmp_path / "mixed"
    shutil.copytree(tiny_run, other)
    code, _ = run(capsys, "gen", "--config", str(TINY), "--seed", "2", "--out", str(other))
    assert code == 0
    (other / "report.json").unlink()
    code, err = run(capsys, "report", "--config", str(TINY), "--out", str(other))
    assert code == 3 and "different corpora" in err[0]["message"]
    assert not (other / "report.json").exists()


def test_tampered_artifact_is_rejected(tiny_run, tmp_path, capsys):
    other = tmp_path / "tampered"
    shutil.copytree(tiny_run, other)
    with open(other / "curves.csv", "a") as fh:
        fh.write("9,unk,1.0,1\n")
    code, err = run(capsys, "report", "--config", str(TINY), "--out", str(other))
    assert code == 3 and "digest" in err[0]["message"]


# ---------------------------------------------------------------- gen


def test_gen_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "gen", "--seed", "5", "--out", str(tmp_path / name))[0] == 0
    for split in ("train", "valid", "test"):
        assert (tmp_path / "a" / "corpus" / f"{split}.tsv").read_bytes() == (tmp_path / "b" / "corpus" / f"{split}.tsv").read_bytes()


def test_gen_ingests_tsv_with_and_without_scores(tmp_path, capsys):
    src = tmp_path / "in"
    src.mkdir()
    (src / "train.tsv").write_text("# header comment\na b c\tx y z\t17.5\n\nb c\ty z\n", encoding="utf-8")
    (src / "test.tsv").write_text("c a\tz x\t90\n", encoding="utf-8")
    out = tmp_path / "out"
    assert run(capsys, "gen", "--ingest", str(src), "--out", str(out))[0] == 0
    pairs = ingest_tsv(out / "corpus" / "train.tsv", "train")
    assert [p.score for p in pairs] == [17.5, None]
    assert pairs[0].source == ["a", "b", "c"] and pairs[1].target == ["y", "z"]
    assert ingest_tsv(out / "corpus" / "test.tsv", "test")[0].score == 90.0


@pytest.mark.parametrize(
    "text, line",
    [("a\tb\n\nc\td\te\tf\n", 3), ("a\tb\t1\nc\t\n", 2), ("a\tb\tnan\n", 1), ("a\tb\tabc\n", 1), ("onlyone\n", 1)],
)
def test_malformed_tsv_reports_the_line(tmp_path, capsys, text, line):
    src = tmp_path / "in"
    src.mkdir()
    (src / "train.tsv").write_text(text, encoding="utf-8")
    code, err = run(capsys, "gen", "--ingest", str(src), "--out", str(tmp_path / "out"))
    assert code == 3
    assert f"line {line}" in err[0]["message"]
    assert not list((tmp_path / "out").rglob("*.tsv"))


def test_empty_tsv_is_a_data_error(tmp_path, capsys):
    src = tmp_path / "in"
    src.mkdir()
    (src / "train.tsv").write_text("# nothing here\n\n", encoding="utf-8")
    code, err = run(capsys, "gen", "--ingest", str(src), "--out", str(tmp_path / "out"))
    assert code == 3 and err[0]["error"] == "DataError"


def test_parse_tsv_line_examples():
    assert parse_tsv_line("# c", 1, "train") is None
    assert parse_tsv_line("   ", 1, "train") is None
    p = parse_tsv_line("a b\tc\t-0.25", 1, "valid")
    assert (p.source, p.target, p.score, p.split) == (["a", "b"], ["c"], -0.25, "valid")


def test_rare_training_tokens_map_to_unk():
    train = [SentencePair(["a", "b"], ["x", "y"]), SentencePair(["a", "once"], ["x", "z"])]
    src, tgt = build_vocabularies(train, VOCAB_CUTOFF)
    assert VOCAB_CUTOFF == 2
    assert "a" in src and "once" not in src and "b" not in src
    assert src.encode(["once"])[0] == UNK
    assert "x" in tgt and "y" not in tgt


# ---------------------------------------------------------------- failures


def test_unknown_config_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nwidth = 3\n")
    code, err = run(capsys, "gen", "--config", str(bad), "--out", str(tmp_path / "o"))
    assert code == 2 and "width" in err[0]["message"]


@pytest.mark.parametrize(
    "content",
    ["[model\n", "seed = 'x'\n", "threshold = 90\n", "[task]\nnoise_ratio = 2.0\n", "lambda = -1\n", "[train]\npatience = 0\n", "task = 3\n"],
)
def test_invalid_configs_exit_2(tmp_path, capsys, content):
    bad = tmp_path / "bad.toml"
    bad.write_text(content)
    assert run(capsys, "gen", "--config", str(bad), "--out", str(tmp_path / "o"))[0] == 2


def test_argument_errors_exit_2(tmp_path, capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "gen", "--seed", "x")[0] == 2
    assert run(capsys, "gen", "--config", str(tmp_path / "missing.toml"))[0] == 2
    assert run(capsys, "finetune", "--mode", "rl")[0] == 2


def test_bad_thread_count_exits_2(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ATRG_THREADS", "many")
    assert run(capsys, "gen", "--out", str(tmp_path / "o"))[0] == 2


def test_missing_inputs_exit_3(tmp_path, capsys):
    code, err = run(capsys, "train", "--out", str(tmp_path / "empty"))
    assert code == 3
    assert set(err[0]) == {"error", "exit", "message"}


def test_numeric_failure_exits_4_and_discards_partials(tmp_path, capsys, monkeypatch):
    out = tmp_path / "o"
    assert run(capsys, "gen", "--config", str(TINY), "--out", str(out))[0] == 0

    def diverge(cfg, corpus, log_path):
        Path(log_path).write_text('{"epoch": 1}\n')
        raise NumericError("training diverged at epoch 1, step 3")

    monkeypatch.setattr(pl, "train_baseline", diverge)
    code, err = run(capsys, "train", "--config", str(TINY), "--out", str(out))
    assert code == 4 and "diverged" in err[0]["message"]
    assert not (out / "base.log.jsonl").exists() and not (out / "base.bin").exists()
    assert (out / "corpus" / "train.tsv").exists()


def test_corrupt_model_file_exits_3(tiny_run, tmp_path, capsys):
    other = tmp_path / "corrupt"
    shutil.copytree(tiny_run, other)
    (other / "base.bin").write_bytes(b"garbage")
    meta = read_json(other / "base.bin.meta.json")
    meta["sha256"] = file_digest(other / "base.bin")
    write_json(meta, other / "base.bin.meta.json")
    assert run(capsys, "perturb", "--config", str(TINY), "--out", str(other))[0] == 3


def test_out_must_be_a_directory(tmp_path, capsys):
    f = tmp_path / "file"
    f.write_text("x")
    assert run(capsys, "gen", "--out", str(f))[0] == 2


# ---------------------------------------------------------------- config and JSON


def test_config_overrides_and_seed_propagation(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("seed = 9\nlambda = 2.5\n[task]\nn_train = 100\n[finetune]\nmax_epochs = 2\n")
    cfg = load_config(path)
    assert cfg.task.n_train == 100 and cfg.finetune.max_epochs == 2 and cfg.finetune.lam == 2.5
    assert {cfg.task.seed, cfg.model.seed, cfg.train.seed, cfg.finetune.seed, cfg.classifier.seed} == {9}
    assert cfg.digest() != RunConfig().digest()
    assert config_from_dict({}).digest() == RunConfig().digest()
    with pytest.raises(ConfigError):
        config_from_dict({"nope": 1})


def test_write_json_is_strict_and_atomic(tmp_path):
    p = tmp_path / "x.json"
    write_json({"b": 1, "a": [1.5, None]}, p)
    assert read_json(p) == {"a": [1.5, None], "b": 1}
    assert not (tmp_path / "x.json.tmp").exists()
    with pytest.raises(ValueError):
        write_json({"a": float("nan")}, tmp_path / "y.json")


def test_empty_ingest_dir_is_a_data_error(tmp_path, capsys):
    (tmp_path / "in").mkdir()
    with pytest.raises(DataError):
        cli.cmd_gen(pl.Workspace(tmp_path / "o", RunConfig()), type("A", (), {"ingest": str(tmp_path / "in")})())


@pytest.mark.parametrize("threads", ["2", "3"])
def test_decodes_do_not_depend_on_thread_count(monkeypatch, threads):
    cfg = load_config(TINY)
    corpus = pl.generate(cfg)
    model = pl.new_model(cfg, corpus).eval()
    sources = [p.source for p in corpus.test]
    monkeypatch.setenv("ATRG_THREADS", threads)
    assert pl.worker_count() == int(threads)
    assert pl.parallel_translate(model, sources) == model.translate(sources)
    assert ad.grad_enabled()
