"""A small pre-norm transformer encoder-decoder on top of :mod:`atrg.autodiff`."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS, EOS, PAD, Batch, DataError, SentencePair, Vocabulary, make_batch, pad_ids

MAGIC = b"ATRG"
FORMAT_VERSION = 1
_NEG = -1e9


class ModelFileError(ValueError):
    """Parameter file is truncated, foreign, or does not match the model."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.3
    max_len: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")

    def digest(self) -> bytes:
        # the seed only matters at initialisation, so it is not part of the identity
        d = asdict(self)
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


@dataclass
class ModelOutput:
    """Teacher-forced result for a batch.

    ``log_probs`` is [B, T, V]; ``src_embed`` and ``tgt_embed`` are the
    token-embedding tensors fed to the network, so input gradients can be
    taken with respect to them.
    """

    log_probs: Tensor
    gold: np.ndarray
    src_embed: Tensor
    tgt_embed: Tensor
    src_mask: np.ndarray
    tgt_mask: np.ndarray


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class Transformer:
    """Encoder-decoder translator with untied input/output embeddings."""

    def __init__(self, config: ModelConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
        self.config = config
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.training = False
        self.dropout_rate = config.dropout
        self.rng = np.random.default_rng(config.seed + 1)
        self.params: dict[str, Tensor] = {}
        self._pe = sinusoidal_positions(config.max_len, config.d_model)
        self._init_params(np.random.default_rng(config.seed))

    # ------------------------------------------------------------ parameters

    def _uniform(self, rng, name: str, shape, fan_in: int):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def _const(self, name: str, value: np.ndarray):
        self.params[name] = Tensor(value, requires_grad=True)

    def _linear(self, rng, name: str, n_in: int, n_out: int):
        self._uniform(rng, f"{name}.w", (n_in, n_out), n_in)
        self._uniform(rng, f"{name}.b", (n_out,), n_in)

    def _norm(self, name: str, dim: int):
        self._const(f"{name}.g", np.ones(dim))
        self._const(f"{name}.b", np.zeros(dim))

    def _attention_params(self, rng, name: str, d: int):
        for proj in ("q", "k", "v", "o"):
            self._linear(rng, f"{name}.{proj}", d, d)

    def _init_params(self, rng):
        c = self.config
        d = c.d_model
        self._uniform(rng, "src_embed", (len(self.src_vocab), d), d)
        self._uniform(rng, "tgt_embed", (len(self.tgt_vocab), d), d)
        for i in range(c.enc_layers):
            p = f"enc{i}"
            self._norm(f"{p}.ln1", d)
            self._attention_params(rng, f"{p}.self", d)
            self._norm(f"{p}.ln2", d)
            self._linear(rng, f"{p}.ff1", d, c.ff_dim)
            self._linear(rng, f"{p}.ff2", c.ff_dim, d)
        self._norm("enc.ln", d)
        for i in range(c.dec_layers):
            p = f"dec{i}"
            self._norm(f"{p}.ln1", d)
            self._attention_params(rng, f"{p}.self", d)
            self._norm(f"{p}.ln2", d)
            self._attention_params(rng, f"{p}.cross", d)
            self._norm(f"{p}.ln3", d)
            self._linear(rng, f"{p}.ff1", d, c.ff_dim)
            self._linear(rng, f"{p}.ff2", c.ff_dim, d)
        self._norm("dec.ln", d)
        self._linear(rng, "out", d, len(self.tgt_vocab))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def train(self, mode: bool = True) -> "Transformer":
        self.training = mode
        return self

    def eval(self) -> "Transformer":
        return self.train(False)

    # ------------------------------------------------------------ building blocks

    def _lin(self, x, name):
        return ad.add(ad.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def _ln(self, x, name):
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _drop(self, x):
        return ad.dropout(x, self.dropout_rate, self.rng, self.training)

    def _split_heads(self, x):
        b, n, d = x.shape
        h = self.config.heads
        return ad.transpose(ad.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))

    def _attend(self, name, query, memory, additive_mask):
        q = self._split_heads(self._lin(query, f"{name}.q"))
        k = self._split_heads(self._lin(memory, f"{name}.k"))
        v = self._split_heads(self._lin(memory, f"{name}.v"))
        dh = q.shape[-1]
        scores = ad.add(ad.mul(ad.matmul(q, ad.swap_last(k)), 1.0 / np.sqrt(dh)), additive_mask)
        ctx = ad.matmul(ad.softmax(scores, -1), v)
        b, h, n, _ = ctx.shape
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, h * dh))
        return self._lin(ctx, f"{name}.o")

    def _ff(self, x, name):
        return self._lin(self._drop(ad.gelu(self._lin(x, f"{name}.ff1"))), f"{name}.ff2")

    # ------------------------------------------------------------ forward

    def embed_source(self, ids: np.ndarray) -> Tensor:
        return ad.mul(ad.take(self.params["src_embed"], ids), np.sqrt(self.config.d_model))

    def embed_target(self, ids: np.ndarray) -> Tensor:
        return ad.mul(ad.take(self.params["tgt_embed"], ids), np.sqrt(self.config.d_model))

    def _check_len(self, n: int):
        if n > self.config.max_len:
            raise DataError(f"sequence length {n} exceeds max_len {self.config.max_len}")

    def encode(self, src_x: Tensor, src_mask: np.ndarray) -> Tensor:
        s = src_x.shape[1]
        self._check_len(s)
        h = self._drop(ad.add(src_x, self._pe[:s]))
        key_mask = np.where(src_mask, 0.0, _NEG)[:, None, None, :]
        for i in range(self.config.enc_layers):
            p = f"enc{i}"
            x = self._ln(h, f"{p}.ln1")
            h = ad.add(h, self._drop(self._attend(f"{p}.self", x, x, key_mask)))
            h = ad.add(h, self._drop(self._ff(self._ln(h, f"{p}.ln2"), p)))
        return self._ln(h, "enc.ln")

    def decode(self, memory: Tensor, src_mask: np.ndarray, tgt_x: Tensor) -> Tensor:
        """Log-probabilities [B, T, V] for every prefix position."""
        t = tgt_x.shape[1]
        self._check_len(t)
        h = self._drop(ad.add(tgt_x, self._pe[:t]))
        causal = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, _NEG)[None, None]
        cross_mask = np.where(src_mask, 0.0, _NEG)[:, None, None, :]
        for i in range(self.config.dec_layers):
            p = f"dec{i}"
            x = self._ln(h, f"{p}.ln1")
            h = ad.add(h, self._drop(self._attend(f"{p}.self", x, x, causal)))
            h = ad.add(h, self._drop(self._attend(f"{p}.cross", self._ln(h, f"{p}.ln2"), memory, cross_mask)))
            h = ad.add(h, self._drop(self._ff(self._ln(h, f"{p}.ln3"), p)))
        return ad.log_softmax(self._lin(self._ln(h, "dec.ln"), "out"), -1)

    def log_probs_from_embeddings(self, src_x, tgt_x, src_mask) -> Tensor:
        return self.decode(self.encode(src_x, src_mask), src_mask, tgt_x)

    def _check_ids(self, batch: Batch):
        if batch.src.max(initial=0) >= len(self.src_vocab) or batch.tgt_in.max(initial=0) >= len(self.tgt_vocab):
            raise IndexError("token index out of vocabulary range")

    def forward_batch(self, batch: Batch) -> ModelOutput:
        self._check_ids(batch)
        src_x = self.embed_source(batch.src)
        tgt_x = self.embed_target(batch.tgt_in)
        lp = self.log_probs_from_embeddings(src_x, tgt_x, batch.src_mask)
        return ModelOutput(lp, batch.tgt_out, src_x, tgt_x, batch.src_mask, batch.tgt_mask)

    def forward_teacher_forced(self, pair: SentencePair | Sequence[SentencePair]) -> ModelOutput:
        pairs = [pair] if isinstance(pair, SentencePair) else list(pair)
        return self.forward_batch(make_batch(pairs, self.src_vocab, self.tgt_vocab))

    # ------------------------------------------------------------ decoding

    def greedy_decode_ids(self, sources: Sequence[Sequence[int]], max_steps: int | None = None) -> list[list[int]]:
        """Greedy decoding of already-encoded (EOS-terminated) sources."""
        if not sources:
            return []
        # leave room for EOS so a decode can be fed back as a teacher-forced target
        cap = self.config.max_len - 1
        max_steps = cap if max_steps is None else min(max_steps, cap)
        src = pad_ids(sources)
        mask = src != PAD
        was_training = self.training
        self.training = False
        try:
            with ad.no_grad():
                memory = self.encode(self.embed_source(src), mask)
                out = [[] for _ in sources]
                done = np.zeros(len(sources), dtype=bool)
                prefix = np.full((len(sources), 1), BOS, dtype=np.int64)
                for _ in range(max_steps):
                    lp = self.decode(memory, mask, self.embed_target(prefix))
                    nxt = lp.data[:, -1].argmax(-1)
                    for i, tok in enumerate(nxt):
                        if done[i]:
                            continue
                        if tok == EOS:
                            done[i] = True
                        else:
                            out[i].append(int(tok))
                    if done.all():
                        break
                    prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        finally:
            self.training = was_training
        return out

    def greedy_decode(self, source: Sequence[str], max_steps: int | None = None) -> list[str]:
        ids = self.src_vocab.encode(source)
        return self.tgt_vocab.decode(self.greedy_decode_ids([ids], max_steps)[0])

    def translate(self, sources: Sequence[Sequence[str]], max_steps: int | None = None, chunk: int = 64) -> list[list[str]]:
        out = []
        for lo in range(0, len(sources), chunk):
            ids = [self.src_vocab.encode(s) for s in sources[lo : lo + chunk]]
            out.extend(self.tgt_vocab.decode(h) for h in self.greedy_decode_ids(ids, max_steps))
        return out

    # ------------------------------------------------------------ persistence

    def vocab_digest(self) -> bytes:
        return hashlib.sha256(self.src_vocab.digest() + self.tgt_vocab.digest()).digest()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            self.params[k].data = v.copy()

    def save_params(self, path) -> None:
        header = MAGIC + struct.pack("<I", FORMAT_VERSION) + self.config.digest() + self.vocab_digest()
        body = b"".join(p.data.astype("<f8").tobytes() for p in self.params.values())
        Path(path).write_bytes(header + body)

    def load_params(self, path) -> "Transformer":
        raw = Path(path).read_bytes()
        head = len(MAGIC) + 4 + 64
        if len(raw) < head:
            raise ModelFileError("truncated parameter file")
        if raw[:4] != MAGIC:
            raise ModelFileError("not an ATRG parameter file")
        (version,) = struct.unpack("<I", raw[4:8])
        if version != FORMAT_VERSION:
            raise ModelFileError(f"unsupported format version {version}")
        if raw[8:40] != self.config.digest():
            raise ModelFileError("model config digest mismatch")
        if raw[40:72] != self.vocab_digest():
            raise ModelFileError("vocabulary digest mismatch")
        expected = sum(p.size for p in self.params.values()) * 8
        if len(raw) - head != expected:
            raise ModelFileError("truncated parameter file")
        offset = head
        for p in self.params.values():
            n = p.size * 8
            p.data = np.frombuffer(raw[offset : offset + n], dtype="<f8").reshape(p.shape).astype(np.float64)
            offset += n
        return self


def model_metadata(model: Transformer) -> dict:
    return {
        "config": asdict(model.config),
        "src_vocab": model.src_vocab.to_list(),
        "tgt_vocab": model.tgt_vocab.to_list(),
    }


def model_from_metadata(meta: dict) -> Transformer:
    return Transformer(ModelConfig(**meta["config"]), Vocabulary(meta["src_vocab"]), Vocabulary(meta["tgt_vocab"]))
