"""Cross-entropy plus attribution-entropy objective and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .attribution import entropy_tensor, one_step_scores
from .autodiff import NumericError, Tensor
from .data import Batch, SentencePair, make_batch
from .model import ModelOutput, Transformer

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    lam: float = 5.0
    label_smoothing: float = 0.1
    dropout: float = 0.3
    weight_decay: float = 1e-4
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    warmup_steps: int = 200
    max_epochs: int = 30
    batch_size: int = 16
    patience: int = 5
    metric: str = "auto"
    attr_fraction: float = 1.0
    attr_chunk: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label smoothing must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not 0.0 < self.attr_fraction <= 1.0:
            raise ValueError("attr_fraction must lie in (0, 1]")
        self.betas = tuple(self.betas)


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float
    attr: float
    lam: float
    tokens: int

    @property
    def total_value(self) -> float:
        return self.total.item()


# ---------------------------------------------------------------- losses


def label_smoothed_ce(outputs: ModelOutput | Tensor, gold: np.ndarray, smoothing: float, mask=None) -> Tensor:
    """Mean over non-PAD positions of -sum_v q(v) log P(v), q = (1-s) onehot + s/V."""
    lp = outputs.log_probs if isinstance(outputs, ModelOutput) else outputs
    gold = np.asarray(gold)
    if outputs is not lp and mask is None:
        mask = outputs.tgt_mask
    if lp.shape[:-1] != gold.shape:
        raise ValueError(f"log-prob rows {lp.shape[:-1]} misaligned with gold {gold.shape}")
    mask = (gold != 0) if mask is None else np.asarray(mask, dtype=bool)
    V = lp.shape[-1]
    idx = np.nonzero(mask)
    nll = ad.neg(ad.index(lp, idx + (gold[idx],)))
    uniform = ad.neg(ad.index(ad.sum_(lp, -1), idx))
    per_tok = ad.add(ad.mul(nll, 1.0 - smoothing), ad.mul(uniform, smoothing / V))
    return ad.mean(per_tok)


def attribution_entropy_loss(model: Transformer, batch: Batch | SentencePair) -> Tensor:
    """Source-attribution entropy of one-step IG, averaged over steps then sentences.

    Differentiable in the model parameters (double backward).
    """
    if isinstance(batch, SentencePair):
        batch = make_batch([batch], model.src_vocab, model.tgt_vocab)
    try:
        src, _ = one_step_scores(model, batch, create_graph=True)
    except NumericError as exc:
        raise NumericError(f"attribution loss aborted for this batch: {exc}") from exc
    h = entropy_tensor(src, batch.src_mask[None, :, :])  # [T, B]
    steps = batch.tgt_mask.T.astype(float)
    per_sentence = ad.div(ad.sum_(ad.mul(h, steps), 0), steps.sum(0))
    return ad.mean(per_sentence)


def combined_loss(model: Transformer, batch: Batch, cfg: TrainingConfig, rng: np.random.Generator | None = None) -> LossBreakdown:
    """L = CE + lambda * Attr.

    CE uses the model's current mode (dropout while training); the
    attribution term is always evaluated without dropout.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    out = model.forward_batch(batch)
    ce = label_smoothed_ce(out, batch.tgt_out, cfg.label_smoothing)
    tokens = int(batch.tgt_mask.sum())
    if cfg.lam == 0:
        return LossBreakdown(ce, ce.item(), 0.0, 0.0, tokens)
    sub = make_batch(_attr_subset(batch, cfg, rng), model.src_vocab, model.tgt_vocab)
    was_training = model.training
    model.eval()
    try:
        attr = attribution_entropy_loss(model, sub)
    finally:
        model.train(was_training)
    return combine_terms(ce, attr, cfg.lam, tokens)


def combine_terms(ce: Tensor, attr: Tensor, lam: float, tokens: int = 0) -> LossBreakdown:
    total = ad.add(ce, ad.mul(attr, lam))
    return LossBreakdown(total, ce.item(), attr.item(), lam, tokens)


def _attr_subset(batch: Batch, cfg: TrainingConfig, rng) -> list[SentencePair]:
    k = max(1, math.ceil(cfg.attr_fraction * len(batch)))
    if k >= len(batch):
        return list(batch.pairs)
    order = (rng or np.random.default_rng(cfg.seed)).permutation(len(batch))[:k]
    return [batch.pairs[i] for i in sorted(order)]


def loss_and_grads(model: Transformer, batch: Batch, cfg: TrainingConfig, rng=None) -> tuple[dict, list[np.ndarray]]:
    """Values and parameter gradients of the combined objective.

    Same quantity as :func:`combined_loss`, but the attribution term is
    differentiated over chunks of ``cfg.attr_chunk`` sentences and the
    gradients accumulated, which bounds the size of the double-backward graph.
    """
    params = model.parameters()
    out = model.forward_batch(batch)
    ce = label_smoothed_ce(out, batch.tgt_out, cfg.label_smoothing)
    grads = [g.data for g in ad.grad(ce, params)]
    del out
    attr_value = 0.0
    if cfg.lam > 0:
        subset = _attr_subset(batch, cfg, rng)
        was_training = model.training
        model.eval()
        try:
            for lo in range(0, len(subset), cfg.attr_chunk):
                group = subset[lo : lo + cfg.attr_chunk]
                attr = attribution_entropy_loss(model, make_batch(group, model.src_vocab, model.tgt_vocab))
                w = len(group) / len(subset)
                attr_value += w * attr.item()
                for acc, g in zip(grads, ad.grad(attr, params)):
                    acc += (cfg.lam * w) * g.data
                del attr
        finally:
            model.train(was_training)
    values = {
        "ce": ce.item(),
        "attr": attr_value,
        "total": ce.item() + cfg.lam * attr_value,
        "lam": cfg.lam,
        "tokens": int(batch.tgt_mask.sum()),
    }
    return values, grads


# ---------------------------------------------------------------- optimisation


def inverse_sqrt_lr(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr`` then base_lr * sqrt(warmup / step)."""
    step = max(step, 1)
    if warmup <= 0:
        return base_lr / math.sqrt(step)
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * math.sqrt(warmup) / math.sqrt(step)


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.98), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    ce: float
    attr: float
    total: float
    lr: float
    val_metric: float
    wallclock: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d.update(d.pop("extra"))
        return json.dumps(d, sort_keys=True)


@dataclass
class TrainResult:
    model: Transformer
    log: list[EpochRecord]
    best_epoch: int
    best_metric: float
    final_lr: float
    mode: str


def token_accuracy(model: Transformer, pairs: Sequence[SentencePair], chunk: int = 64) -> float:
    """Teacher-forced argmax accuracy over gold positions."""
    hit = tot = 0
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            for lo in range(0, len(pairs), chunk):
                b = make_batch(pairs[lo : lo + chunk], model.src_vocab, model.tgt_vocab)
                pred = model.forward_batch(b).log_probs.data.argmax(-1)
                m = b.tgt_mask
                hit += int(((pred == b.tgt_out) & m).sum())
                tot += int(m.sum())
    finally:
        model.train(was_training)
    return hit / max(tot, 1)


def validation_ce(model: Transformer, pairs: Sequence[SentencePair], smoothing: float = 0.0, chunk: int = 64) -> float:
    total = n = 0.0
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            for lo in range(0, len(pairs), chunk):
                group = pairs[lo : lo + chunk]
                b = make_batch(group, model.src_vocab, model.tgt_vocab)
                total += label_smoothed_ce(model.forward_batch(b), b.tgt_out, smoothing).item() * len(group)
                n += len(group)
    finally:
        model.train(was_training)
    return total / max(n, 1)


# metric name -> (evaluator, higher_is_better)
MetricFn = Callable[[Transformer, Sequence[SentencePair]], float]


def _metric(cfg: TrainingConfig, valid, metrics: dict[str, tuple[MetricFn, bool]] | None):
    metrics = dict(metrics or {})
    metrics.setdefault("ce", (lambda m, v: validation_ce(m, v), False))
    metrics.setdefault("token_accuracy", (token_accuracy, True))
    name = cfg.metric
    if name == "auto":
        name = "hallucination_rate" if "hallucination_rate" in metrics else "ce"
    if name not in metrics:
        raise ValueError(f"unknown early-stopping metric {name!r}")
    return name, metrics[name]


def train(
    model: Transformer,
    train_pairs: Sequence[SentencePair],
    valid_pairs: Sequence[SentencePair],
    cfg: TrainingConfig,
    mode: str = "ce",
    metrics: dict[str, tuple[MetricFn, bool]] | None = None,
    log_path=None,
) -> TrainResult:
    """Epoch loop with Adam, inverse-sqrt schedule and early stopping.

    ``mode`` is ``"ce"`` or ``"ce+attr"``; the latter adds ``cfg.lam`` times
    the attribution-entropy loss. The returned model holds the parameters of
    the best validation epoch.
    """
    if mode not in ("ce", "ce+attr"):
        raise ValueError(f"mode must be 'ce' or 'ce+attr', got {mode!r}")
    if not train_pairs:
        raise ValueError("training corpus is empty")
    if not valid_pairs:
        valid_pairs = list(train_pairs)
    loss_cfg = cfg if mode == "ce+attr" else replace(cfg, lam=0.0)
    rng = np.random.default_rng(cfg.seed)
    model.rng = np.random.default_rng(cfg.seed + 7919)
    model.dropout_rate = cfg.dropout
    params = model.parameters()
    opt = Adam(params, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    name, (metric_fn, higher) = _metric(cfg, valid_pairs, metrics)
    sign = -1.0 if higher else 1.0

    best_state = model.state()
    best = math.inf
    best_epoch = 0
    records: list[EpochRecord] = []
    bad = 0
    step = 0
    lr = inverse_sqrt_lr(1, cfg.lr, cfg.warmup_steps)
    order = np.arange(len(train_pairs))
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            rng.shuffle(order)
            sums = np.zeros(3)
            nb = 0
            model.train()
            for lo in range(0, len(order), cfg.batch_size):
                group = [train_pairs[i] for i in order[lo : lo + cfg.batch_size]]
                batch = make_batch(group, model.src_vocab, model.tgt_vocab)
                step += 1
                lr = inverse_sqrt_lr(step, cfg.lr, cfg.warmup_steps)
                try:
                    values, grads = loss_and_grads(model, batch, loss_cfg, rng)
                except NumericError as exc:
                    model.load_state(best_state)
                    raise NumericError(f"training diverged at epoch {epoch}, step {step}: {exc}") from exc
                if not all(np.all(np.isfinite(g)) for g in grads):
                    model.load_state(best_state)
                    raise NumericError(f"training diverged at epoch {epoch}, step {step}")
                opt.step(grads, lr)
                sums += (values["ce"], values["attr"], values["total"])
                nb += 1
            model.eval()
            value = metric_fn(model, valid_pairs)
            means = sums / max(nb, 1)
            extra = {"metric": name, "mode": mode, "attr_fraction": cfg.attr_fraction if mode == "ce+attr" else 0.0}
            rec = EpochRecord(epoch, means[0], means[1], means[2], lr, value, time.perf_counter() - t0, extra)
            records.append(rec)
            log.info("epoch %d %s ce=%.4f attr=%.4f %s=%.4f", epoch, mode, means[0], means[1], name, value)
            if fh:
                fh.write(rec.to_json() + "\n")
                fh.flush()
            if sign * value < best:
                best, best_epoch, bad = sign * value, epoch, 0
                best_state = model.state()
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    finally:
        if fh:
            fh.close()
    model.load_state(best_state)
    model.eval()
    return TrainResult(model, records, best_epoch, sign * best, lr, mode)
