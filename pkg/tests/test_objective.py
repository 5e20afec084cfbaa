import copy
import json
import math

import numpy as np
import pytest

from atrg import autodiff as ad
from atrg.autodiff import NumericError, Tensor
from atrg.attribution import attribution_entropy, one_step_attribution_batch
from atrg.data import PAD, SentencePair, Vocabulary, make_batch
from atrg.model import ModelConfig, Transformer
from atrg import objective
from atrg.objective import (
    TrainingConfig,
    attribution_entropy_loss,
    combine_terms,
    combined_loss,
    inverse_sqrt_lr,
    label_smoothed_ce,
    loss_and_grads,
    token_accuracy,
    train,
)
from helpers import param_fd

SRC = [f"s{i}" for i in range(8)]
TGT = [f"t{i}" for i in range(8)]


def small_model(seed=0, d=16, ff=32):
    cfg = ModelConfig(d_model=d, enc_layers=1, dec_layers=1, heads=2, ff_dim=ff, dropout=0.0, max_len=16, seed=seed)
    return Transformer(cfg, Vocabulary(SRC), Vocabulary(TGT))


def copy_corpus(n, seed):
    """Position-wise s_i -> t_i translation."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        ids = rng.integers(0, len(SRC), int(rng.integers(3, 7)))
        out.append(SentencePair([SRC[i] for i in ids], [TGT[i] for i in ids]))
    return out


PAIRS = copy_corpus(6, 11)


# ---------------------------------------------------------------- cross-entropy


def test_uniform_prediction_costs_log_vocab():
    V = 7
    lp = Tensor(np.full((2, 3, V), -math.log(V)))
    gold = np.array([[4, 5, 6], [4, 0, 0]])
    for s in (0.0, 0.1, 0.5):
        assert label_smoothed_ce(lp, gold, s).item() == pytest.approx(math.log(V), abs=1e-12)


def test_smoothed_ce_matches_direct_summation():
    rng = np.random.default_rng(0)
    V, s = 5, 0.1
    logits = rng.normal(size=(3, 4, V))
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    gold = rng.integers(1, V, size=(3, 4))
    gold[1, 2:] = 0
    gold[2, 3] = 0
    total, count = 0.0, 0
    for b in range(3):
        for t in range(4):
            if gold[b, t] == 0:
                continue
            for v in range(V):
                q = (1 - s) * (v == gold[b, t]) + s / V
                total -= q * lp[b, t, v]
            count += 1
    assert label_smoothed_ce(Tensor(lp), gold, s).item() == pytest.approx(total / count, abs=1e-12)


def test_perfect_prediction_without_smoothing_costs_nothing():
    V = 6
    gold = np.array([[2, 3, 5]])
    lp = np.full((1, 3, V), -np.inf)
    lp[0, np.arange(3), gold[0]] = 0.0
    lp = np.where(np.isinf(lp), -1e300, lp)
    assert label_smoothed_ce(Tensor(lp), gold, 0.0).item() == 0.0


def test_misaligned_gold_rejected():
    with pytest.raises(ValueError):
        label_smoothed_ce(Tensor(np.zeros((1, 3, 4))), np.ones((1, 2), dtype=int), 0.0)


# ---------------------------------------------------------------- combined objective


def test_breakdown_adds_up():
    b = combine_terms(Tensor(2.0), Tensor(1.2), 5.0)
    assert b.total_value == pytest.approx(8.0, abs=1e-12)
    assert (b.ce, b.attr, b.lam) == (2.0, 1.2, 5.0)


def test_lambda_zero_is_plain_cross_entropy():
    m = small_model().eval()
    batch = make_batch(PAIRS, m.src_vocab, m.tgt_vocab)
    cfg = TrainingConfig(lam=0.0)
    ce = label_smoothed_ce(m.forward_batch(batch), batch.tgt_out, cfg.label_smoothing).item()
    assert combined_loss(m, batch, cfg).total_value == ce
    values, _ = loss_and_grads(m, batch, cfg)
    assert values["total"] == ce and values["attr"] == 0.0


def test_loss_grows_with_lambda():
    m = small_model(seed=1).eval()
    batch = make_batch(PAIRS, m.src_vocab, m.tgt_vocab)
    totals = [combined_loss(m, batch, TrainingConfig(lam=lam)).total_value for lam in (0.0, 0.5, 2.0, 5.0)]
    assert all(a < b for a, b in zip(totals, totals[1:]))


def test_breakdown_is_consistent_with_lambda():
    m = small_model(seed=2).eval()
    batch = make_batch(PAIRS, m.src_vocab, m.tgt_vocab)
    b = combined_loss(m, batch, TrainingConfig(lam=3.0))
    assert abs(b.total_value - (b.ce + 3.0 * b.attr)) <= 1e-9
    values, _ = loss_and_grads(m, batch, TrainingConfig(lam=3.0))
    assert abs(values["total"] - (values["ce"] + 3.0 * values["attr"])) <= 1e-9
    assert values["attr"] == pytest.approx(b.attr, abs=1e-12)


def test_attribution_loss_is_mean_of_per_step_entropies():
    m = small_model(seed=3).eval()
    batch = make_batch(PAIRS, m.src_vocab, m.tgt_vocab)
    mats = one_step_attribution_batch(m, PAIRS)
    expect = np.mean([np.mean([attribution_entropy(row, mat.source_mask) for row in mat.source]) for mat in mats])
    assert attribution_entropy_loss(m, batch).item() == pytest.approx(expect, abs=1e-9)


def test_attribution_loss_bounded_by_log_source_length():
    m = small_model(seed=4).eval()
    for pair in PAIRS:
        value = attribution_entropy_loss(m, pair).item()
        assert -1e-12 <= value <= math.log(len(pair.source) + 1) + 1e-9


def test_one_hot_attributions_give_zero_loss():
    m = small_model(seed=5).eval()
    table = m.params["src_embed"].data
    keep = m.src_vocab.encode(["s3"])[0]
    # every other source id shares the PAD row, so only s3 differs from the baseline
    for i in range(table.shape[0]):
        if i != keep:
            table[i] = table[PAD]
    pair = SentencePair(["s3"], ["t1", "t2"])
    assert attribution_entropy_loss(m, pair).item() == pytest.approx(0.0, abs=1e-6)


def test_attribution_term_ignores_dropout():
    m = small_model(seed=6)
    m.dropout_rate = 0.5
    batch = make_batch(PAIRS, m.src_vocab, m.tgt_vocab)
    cfg = TrainingConfig(lam=1.0)
    held_out = combined_loss(m.eval(), batch, cfg).attr
    m.train()
    assert combined_loss(m, batch, cfg).attr == held_out
    assert m.training


@pytest.mark.parametrize("runner", ["combined", "chunked"])
def test_objective_gradient_matches_finite_differences(runner):
    m = small_model(seed=7).eval()
    batch = make_batch(PAIRS[:4], m.src_vocab, m.tgt_vocab)
    cfg = TrainingConfig(lam=5.0, attr_chunk=3)
    params = m.parameters()
    if runner == "combined":
        grads = [g.data for g in ad.grad(combined_loss(m, batch, cfg).total, params)]
    else:
        grads = loss_and_grads(m, batch, cfg)[1]

    def value():
        with ad.no_grad():
            return combined_loss(m, batch, cfg).total_value

    rng = np.random.default_rng(8)
    for _ in range(12):
        j = int(rng.integers(len(params)))
        k = int(rng.integers(params[j].size))
        fd = param_fd(value, params[j], k, h=1e-5)
        an = grads[j].flat[k]
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-4), (j, k, fd, an)


# ---------------------------------------------------------------- schedule and optimiser


def test_schedule_after_warmup():
    base, warm = 5e-4, 300
    for step in (300, 301, 1000, 12345):
        assert inverse_sqrt_lr(step, base, warm) == pytest.approx(base * math.sqrt(warm) / math.sqrt(step), abs=1e-12)


def test_schedule_warms_up_linearly_and_peaks():
    lrs = [inverse_sqrt_lr(t, 1e-3, 10) for t in range(1, 40)]
    assert lrs[0] == pytest.approx(1e-4)
    assert max(lrs) == pytest.approx(1e-3) and int(np.argmax(lrs)) == 9
    assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))


def test_adam_weight_decay_is_decoupled():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = objective.Adam([p], weight_decay=0.1)
    opt.step([np.zeros(1)], 0.5)
    # zero gradient: only the decay term moves the weight
    assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)


# ---------------------------------------------------------------- training loop


FAST = dict(lr=5e-3, warmup_steps=20, batch_size=5, dropout=0.0, label_smoothing=0.0)


def test_first_epoch_is_deterministic():
    pairs = copy_corpus(20, 1)
    cfg = TrainingConfig(max_epochs=1, **FAST)
    a = train(small_model(seed=9), pairs, pairs, cfg).log[0]
    b = train(small_model(seed=9), pairs, pairs, cfg).log[0]
    assert (a.ce, a.total, a.val_metric) == (b.ce, b.total, b.val_metric)


@pytest.fixture(scope="module")
def toy_model():
    train_pairs, valid_pairs = copy_corpus(50, 0), copy_corpus(20, 1)
    m = small_model(seed=0, d=32, ff=64)
    cfg = TrainingConfig(max_epochs=30, patience=30, metric="token_accuracy", **FAST)
    return train(m, train_pairs, valid_pairs, cfg), valid_pairs


def test_toy_corpus_is_learned(toy_model):
    result, valid = toy_model
    assert token_accuracy(result.model, valid) >= 0.95


def test_best_epoch_is_returned(toy_model):
    result, valid = toy_model
    values = [r.val_metric for r in result.log]
    assert result.best_metric == max(values)
    assert result.log[result.best_epoch - 1].val_metric == max(values)
    assert token_accuracy(result.model, valid) == result.best_metric


def test_attribution_finetune_lowers_source_entropy(toy_model):
    result, valid = toy_model
    base = result.model
    batch = make_batch(valid, base.src_vocab, base.tgt_vocab)
    before = attribution_entropy_loss(base, batch).item()
    cfg = TrainingConfig(lam=5.0, max_epochs=1, lr=1e-3, warmup_steps=1, batch_size=10, dropout=0.0)
    tuned = train(copy.deepcopy(base), copy_corpus(50, 0), valid, cfg, mode="ce+attr")
    assert tuned.log[0].extra["mode"] == "ce+attr" and tuned.log[0].extra["attr_fraction"] == 1.0
    assert attribution_entropy_loss(tuned.model, batch).item() < before


def test_early_stopping_respects_patience():
    pairs = copy_corpus(10, 2)
    # a metric that only gets worse stops after `patience` epochs without improvement
    calls = []

    def worsening(model, valid):
        calls.append(1)
        return float(len(calls))

    cfg = TrainingConfig(max_epochs=10, patience=2, metric="worse", **FAST)
    result = train(small_model(), pairs, pairs, cfg, metrics={"worse": (worsening, False)})
    assert len(result.log) == 3 and result.best_epoch == 1 and result.best_metric == 1.0


def test_divergence_raises_and_restores_best_state(monkeypatch):
    pairs = copy_corpus(10, 3)
    m = small_model(seed=10)
    start = m.state()
    real = objective.loss_and_grads
    count = [0]

    def flaky(model, batch, cfg, rng=None):
        count[0] += 1
        if count[0] == 2:
            raise NumericError("non-finite value in forward pass")
        return real(model, batch, cfg, rng)

    monkeypatch.setattr(objective, "loss_and_grads", flaky)
    with pytest.raises(NumericError, match="diverged"):
        train(m, pairs, pairs, TrainingConfig(max_epochs=2, **FAST))
    assert all(np.array_equal(m.state()[k], v) for k, v in start.items())


def test_nan_gradient_aborts(monkeypatch):
    pairs = copy_corpus(10, 4)
    real = objective.loss_and_grads

    def poisoned(model, batch, cfg, rng=None):
        values, grads = real(model, batch, cfg, rng)
        grads[0] = grads[0] * np.nan
        return values, grads

    monkeypatch.setattr(objective, "loss_and_grads", poisoned)
    with pytest.raises(NumericError):
        train(small_model(), pairs, pairs, TrainingConfig(max_epochs=1, **FAST))


def test_bad_mode_and_config_rejected():
    with pytest.raises(ValueError):
        train(small_model(), PAIRS, PAIRS, TrainingConfig(), mode="rl")
    with pytest.raises(ValueError):
        TrainingConfig(lam=-1.0)
    with pytest.raises(ValueError):
        train(small_model(), [], PAIRS, TrainingConfig())


def test_epoch_log_lines_are_json(tmp_path):
    pairs = copy_corpus(10, 5)
    path = tmp_path / "log.jsonl"
    train(small_model(), pairs, pairs, TrainingConfig(max_epochs=2, **FAST), log_path=path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert {"ce", "attr", "total", "lr", "val_metric", "wallclock", "mode"} <= set(rows[0])
