"""Integrated Gradients over source and target-prefix token embeddings.

For a sentence with target length T the model is probed at every
generation step t with F_t = log p(y_t | prefix_t, source). All T steps are
evaluated in one backward pass by replicating the inputs T times along the
batch axis; copy t only carries F_t, so its input gradient is exactly the
gradient of F_t.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .data import BOS, PAD, Batch, SentencePair, make_batch

EPS = 1e-8


@dataclass
class AttributionMatrix:
    """Signed per-token scores for each generation step.

    ``source`` is [T, S]. ``target`` is [T, T]; row t holds scores for prefix
    positions 0..t and zeros above the diagonal. ``source_mask`` marks real
    (non-PAD) source positions.
    """

    source: np.ndarray
    target: np.ndarray
    source_mask: np.ndarray
    source_tokens: list[str] = field(default_factory=list)
    target_tokens: list[str] = field(default_factory=list)
    f_input: np.ndarray | None = None
    f_baseline: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return self.source.shape[0]

    def truncate(self, t: int) -> "AttributionMatrix":
        """Sub-matrix of timesteps 0..t."""
        if not 0 <= t < self.steps:
            raise IndexError(f"timestep {t} out of range for T={self.steps}")
        return AttributionMatrix(
            self.source[: t + 1],
            self.target[: t + 1, : t + 1],
            self.source_mask,
            self.source_tokens,
            self.target_tokens[: t + 1],
            None if self.f_input is None else self.f_input[: t + 1],
            None if self.f_baseline is None else self.f_baseline[: t + 1],
        )

    def prefix_mask(self, t: int) -> np.ndarray:
        return np.arange(self.steps) <= t

    def to_dict(self) -> dict:
        return {
            "source_tokens": list(self.source_tokens),
            "target_tokens": list(self.target_tokens),
            "source_scores": self.source.tolist(),
            "target_scores": [self.target[t, : t + 1].tolist() for t in range(self.steps)],
            "source_mask": self.source_mask.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributionMatrix":
        rows = d["target_scores"]
        T = len(rows)
        target = np.zeros((T, T))
        for t, r in enumerate(rows):
            target[t, : len(r)] = r
        return cls(
            np.asarray(d["source_scores"], dtype=float).reshape(T, -1),
            target,
            np.asarray(d["source_mask"], dtype=bool),
            list(d.get("source_tokens", [])),
            list(d.get("target_tokens", [])),
        )


@dataclass
class AttributionFeatures:
    source_entropy: float
    target_entropy: float
    source_gradient: float
    target_gradient: float

    def as_array(self) -> np.ndarray:
        return np.array([self.source_entropy, self.target_entropy, self.source_gradient, self.target_gradient])

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- features


def attribution_entropy(scores, mask=None) -> float:
    """Shannon entropy (nats) of normalized attribution magnitudes."""
    a = np.abs(np.asarray(scores, dtype=float))
    if mask is not None:
        a = a[np.asarray(mask, dtype=bool)]
    n = a.size
    if n == 0:
        raise ValueError("attribution_entropy needs at least one unmasked token")
    if np.all(a <= EPS):
        return float(np.log(n))
    p = a / (a.sum() + EPS)
    nz = p[p > 0]
    # EPS leaves the p summing to slightly under 1; keep the ln(n) bound exact
    return float(min(-(nz * np.log(nz)).sum(), np.log(n)))


def _normalized_rows(m: AttributionMatrix, side: str) -> np.ndarray:
    if side == "source":
        a = np.abs(m.source) * m.source_mask[None, :]
    elif side == "target":
        a = np.abs(m.target) * np.tril(np.ones((m.steps, m.steps)))
    else:
        raise ValueError(f"side must be 'source' or 'target', got {side!r}")
    return a / (a.sum(axis=1, keepdims=True) + EPS)


def attribution_gradient_feature(matrix: AttributionMatrix, side: str) -> float:
    """Summed absolute timestep differences of normalized scores, divided by T.

    Prefix positions not yet generated count as zero, so a newly added
    target token contributes its full normalized score.
    """
    T = matrix.steps
    if T <= 1:
        return 0.0
    p = _normalized_rows(matrix, side)
    return float(np.abs(np.diff(p, axis=0)).sum() / T)


def extract_features(matrix: AttributionMatrix) -> AttributionFeatures:
    T = matrix.steps
    src_h = np.mean([attribution_entropy(matrix.source[t], matrix.source_mask) for t in range(T)])
    tgt_h = np.mean([attribution_entropy(matrix.target[t, : t + 1]) if t else 0.0 for t in range(T)])
    return AttributionFeatures(
        float(src_h),
        float(tgt_h),
        attribution_gradient_feature(matrix, "source"),
        attribution_gradient_feature(matrix, "target"),
    )


# ---------------------------------------------------------------- IG machinery


@contextlib.contextmanager
def frozen(model):
    """Temporarily stop parameters from requiring gradients."""
    params = model.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def baseline_ids(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """All-PAD source and BOS+PAD prefix of the same shapes as ``batch``."""
    src = np.full_like(batch.src, PAD)
    tgt = np.full_like(batch.tgt_in, PAD)
    tgt[:, 0] = BOS
    return src, tgt


def _timestep_copies(T: int, B: int):
    """Copy index t*B+b carries F for sentence b at step t."""
    rows = np.arange(T * B)
    return rows, np.repeat(np.arange(T), B), np.tile(np.arange(B), T)


def _selected_logprob(model, src_z, tgt_z, src_mask, gold, weights, T, B):
    lp = model.log_probs_from_embeddings(src_z, tgt_z, np.tile(src_mask, (T, 1)))
    rows, steps, sents = _timestep_copies(T, B)
    picked = ad.index(lp, (rows, steps, gold[sents, steps]))
    return ad.sum_(ad.mul(picked, weights[sents, steps])), picked


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite attribution gradient")


def _realized_logprob(model, src_x, tgt_x, src_mask, gold):
    with ad.no_grad():
        lp = model.log_probs_from_embeddings(src_x, tgt_x, src_mask).data
    B, T = gold.shape
    return lp[np.arange(B)[:, None], np.arange(T)[None, :], gold]


def integrated_gradients(model, pair: SentencePair, steps: int = 64, chunk: int = 64) -> AttributionMatrix:
    """Midpoint-rule IG from the PAD/BOS baseline to the actual embeddings."""
    if steps < 1:
        raise ValueError("integrated_gradients needs steps >= 1")
    batch = make_batch([pair], model.src_vocab, model.tgt_vocab)
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            x_src = model.embed_source(batch.src).data
            x_tgt = model.embed_target(batch.tgt_in).data
            b_src, b_tgt = baseline_ids(batch)
            xb_src = model.embed_source(b_src).data
            xb_tgt = model.embed_target(b_tgt).data
        d_src, d_tgt = x_src - xb_src, x_tgt - xb_tgt
        T = batch.tgt_out.shape[1]
        gold = batch.tgt_out
        g_src = np.zeros_like(x_src[0])[None].repeat(T, 0)
        g_tgt = np.zeros_like(x_tgt[0])[None].repeat(T, 0)
        alphas = (np.arange(steps) + 0.5) / steps
        per_chunk = max(1, chunk // T)
        with frozen(model), ad.enable_grad():
            for lo in range(0, steps, per_chunk):
                a = alphas[lo : lo + per_chunk]
                k = len(a)
                # copy index: alpha-major, then timestep
                zs = xb_src + a[:, None, None, None] * d_src[None]
                zt = xb_tgt + a[:, None, None, None] * d_tgt[None]
                zs = Tensor(np.repeat(zs, T, axis=0).reshape(k * T, *x_src.shape[1:]), requires_grad=True)
                zt = Tensor(np.repeat(zt, T, axis=0).reshape(k * T, *x_tgt.shape[1:]), requires_grad=True)
                lp = model.log_probs_from_embeddings(zs, zt, np.repeat(batch.src_mask, k * T, axis=0))
                step_idx = np.tile(np.arange(T), k)
                f = ad.sum_(ad.index(lp, (np.arange(k * T), step_idx, gold[0, step_idx])))
                gs, gt = ad.grad(f, [zs, zt])
                _check_finite(gs.data, gt.data)
                g_src += gs.data.reshape(k, T, *x_src.shape[1:]).sum(0)
                g_tgt += gt.data.reshape(k, T, *x_tgt.shape[1:]).sum(0)
        src_scores = (d_src * g_src / steps).sum(-1)
        tgt_scores = np.tril((d_tgt * g_tgt / steps).sum(-1))
        f_in = _realized_logprob(model, Tensor(x_src), Tensor(x_tgt), batch.src_mask, gold)[0]
        f_base = _realized_logprob(model, Tensor(xb_src), Tensor(xb_tgt), batch.src_mask, gold)[0]
    finally:
        model.train(was_training)
    return _as_matrix(model, pair, batch, src_scores, tgt_scores, f_in, f_base)


def _as_matrix(model, pair, batch, src_scores, tgt_scores, f_in=None, f_base=None):
    tgt_tokens = ["<s>"] + list(model.tgt_vocab.decode(batch.tgt_in[0, 1:]))
    return AttributionMatrix(
        source=src_scores,
        target=tgt_scores,
        source_mask=batch.src_mask[0].copy(),
        source_tokens=list(model.src_vocab.decode(batch.src[0])),
        target_tokens=tgt_tokens,
        f_input=f_in,
        f_baseline=f_base,
    )


def one_step_scores(model, batch: Batch, create_graph: bool = False) -> tuple[Tensor, Tensor]:
    """Gradient-times-(input minus baseline), gradient taken at the input only.

    Returns signed source scores [T, B, S] and prefix scores [T, B, T]. With
    ``create_graph`` both are differentiable functions of the parameters.
    """
    with ad.enable_grad():
        return _one_step_scores(model, batch, create_graph)


def _one_step_scores(model, batch: Batch, create_graph: bool) -> tuple[Tensor, Tensor]:
    B, T = batch.tgt_out.shape
    b_src, b_tgt = baseline_ids(batch)
    x_src = model.embed_source(batch.src)
    x_tgt = model.embed_target(batch.tgt_in)
    d_src = ad.sub(x_src, model.embed_source(b_src))
    d_tgt = ad.sub(x_tgt, model.embed_target(b_tgt))
    if not create_graph:
        x_src, x_tgt = x_src.detach(), x_tgt.detach()
        d_src, d_tgt = d_src.detach(), d_tgt.detach()
        x_src.requires_grad = x_tgt.requires_grad = True
    zs = ad.tile(x_src, T, axis=0)
    zt = ad.tile(x_tgt, T, axis=0)
    weights = batch.tgt_mask.astype(float)
    ctx = contextlib.nullcontext() if create_graph else frozen(model)
    with ctx:
        f, _ = _selected_logprob(model, zs, zt, batch.src_mask, batch.tgt_out, weights, T, B)
        gs, gt = ad.grad(f, [zs, zt], create_graph=create_graph)
    _check_finite(gs.data, gt.data)
    src = ad.sum_(ad.mul(ad.reshape(gs, (T, B) + x_src.shape[1:]), d_src), -1)
    tgt = ad.sum_(ad.mul(ad.reshape(gt, (T, B) + x_tgt.shape[1:]), d_tgt), -1)
    return src, tgt


def one_step_attribution(model, pair: SentencePair) -> AttributionMatrix:
    """Single-point approximation (x - x') * dF/dx for every step."""
    batch = make_batch([pair], model.src_vocab, model.tgt_vocab)
    was_training = model.training
    model.eval()
    try:
        src, tgt = one_step_scores(model, batch)
    finally:
        model.train(was_training)
    return _as_matrix(model, pair, batch, src.data[:, 0], np.tril(tgt.data[:, 0]))


def one_step_attribution_batch(model, pairs, chunk: int = 16) -> list[AttributionMatrix]:
    """:func:`one_step_attribution` for many pairs, batched."""
    out = []
    was_training = model.training
    model.eval()
    try:
        for lo in range(0, len(pairs), chunk):
            group = pairs[lo : lo + chunk]
            batch = make_batch(group, model.src_vocab, model.tgt_vocab)
            src, tgt = one_step_scores(model, batch)
            for b, pair in enumerate(group):
                S = len(model.src_vocab.encode(pair.source))
                T = len(pair.target) + 1
                single = make_batch([pair], model.src_vocab, model.tgt_vocab)
                out.append(_as_matrix(model, pair, single, src.data[:T, b, :S], np.tril(tgt.data[:T, b, :T])))
    finally:
        model.train(was_training)
    return out


def entropy_tensor(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Differentiable row-wise attribution entropy over the last axis."""
    mask = np.broadcast_to(np.asarray(mask, dtype=float), scores.shape)
    a = ad.mul(ad.abs_(scores), mask)
    z = ad.add(ad.sum_(a, -1, keepdims=True), EPS)
    p = ad.div(a, z)
    # exact 0 log 0 = 0 without touching the gradient of non-zero terms
    safe = ad.add(p, (p.data == 0).astype(float))
    h = ad.neg(ad.sum_(ad.mul(p, ad.log(safe)), -1))
    cap = np.log(np.maximum(mask.sum(-1), 1))
    pinned = np.all(a.data <= EPS, axis=-1) | (h.data > cap)
    if pinned.any():
        h = ad.add(ad.mul(h, (~pinned).astype(float)), np.where(pinned, cap, 0.0))
    return h
