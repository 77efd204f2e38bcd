"""Hierarchical case encoder and the multi-label outcome head.

paragraph tokens -> mean of token embeddings -> + paragraph position embedding
-> 2 pre-norm transformer layers over paragraphs -> max-pool -> case vector
-> linear -> sigmoid per label.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .corpus import CaseRecord
from .diffcore import ParameterStore, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    max_tokens_per_paragraph: int = 128
    max_paragraphs: int = 64
    embedding_dim: int = 64
    contextualizer_layers: int = 2
    attention_heads: int = 4
    ffn_dim: int = 128
    embedding_init_scale: float = 0.1
    residual_init_scale: float = 0.1

    def __post_init__(self):
        if self.embedding_dim % self.attention_heads:
            raise ValueError(f"embedding_dim {self.embedding_dim} not divisible by attention_heads {self.attention_heads}")
        if self.contextualizer_layers < 1 or self.max_paragraphs < 1 or self.max_tokens_per_paragraph < 1:
            raise ValueError("encoder limits must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CaseBatch:
    """Padded paragraph layout for B cases with at most P paragraphs each.

    Slot ``b * P + p`` holds paragraph ``p`` of case ``b``; ``offsets`` index
    the flat ``tokens`` array per slot (empty for padding slots).
    """

    ids: tuple[str, ...]
    tokens: np.ndarray
    offsets: np.ndarray
    mask: np.ndarray

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    @property
    def n_slots(self) -> int:
        return self.mask.shape[1]


def make_batch(cases: Sequence[CaseRecord], cfg: EncoderConfig) -> CaseBatch:
    if not cases:
        raise ValueError("empty batch")
    P = min(cfg.max_paragraphs, max(len(c.paragraphs) for c in cases))
    T = cfg.max_tokens_per_paragraph
    B = len(cases)
    lengths = np.zeros((B, P), dtype=np.int64)
    chunks = []
    for b, c in enumerate(cases):
        for p, par in enumerate(c.paragraphs[:P]):
            piece = par[:T]
            lengths[b, p] = piece.size
            chunks.append(piece)
    offsets = np.zeros(B * P + 1, dtype=np.int64)
    np.cumsum(lengths.reshape(-1), out=offsets[1:])
    tokens = np.concatenate(chunks).astype(np.int64)
    return CaseBatch(tuple(c.id for c in cases), tokens, offsets, lengths > 0)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class HierarchicalEncoder:
    """Parameters live in a shared :class:`ParameterStore` under ``prefix``."""

    def __init__(self, store: ParameterStore, prefix: str, cfg: EncoderConfig, vocab_size: int,
                 rng: np.random.Generator | None = None):
        self.store = store
        self.prefix = prefix
        self.cfg = cfg
        self.vocab_size = vocab_size
        if rng is not None:
            self._init(rng)

    def _init(self, rng: np.random.Generator) -> None:
        d, f, s = self.cfg.embedding_dim, self.cfg.ffn_dim, self.store
        p = self.prefix
        s.add(f"{p}tok", _normal(rng, (self.vocab_size, d), self.cfg.embedding_init_scale))
        s.add(f"{p}pos", _normal(rng, (self.cfg.max_paragraphs, d), 0.02))
        for layer in range(self.cfg.contextualizer_layers):
            q = f"{p}l{layer}."
            for name in ("wq", "wk", "wv"):
                s.add(q + name, _normal(rng, (d, d), 1.0 / math.sqrt(d)))
            # residual branches start small so the stream keeps the token-embedding scale
            s.add(q + "wo", _normal(rng, (d, d), self.cfg.residual_init_scale / math.sqrt(d)))
            s.add(q + "ln1.g", np.ones(d))
            s.add(q + "ln1.b", np.zeros(d))
            s.add(q + "w1", _normal(rng, (d, f), 1.0 / math.sqrt(d)))
            s.add(q + "b1", np.zeros(f))
            s.add(q + "w2", _normal(rng, (f, d), self.cfg.residual_init_scale / math.sqrt(f)))
            s.add(q + "b2", np.zeros(d))
            s.add(q + "ln2.g", np.ones(d))
            s.add(q + "ln2.b", np.zeros(d))

    def _p(self, name: str) -> Tensor:
        return self.store[self.prefix + name]

    # single-paragraph surface -------------------------------------------------

    def encode_paragraph(self, tokens: Sequence[int]) -> Tensor:
        toks = np.asarray(tokens, dtype=np.int64)[: self.cfg.max_tokens_per_paragraph]
        if toks.size == 0:
            raise ValueError("cannot encode an empty paragraph")
        pooled = dc.segment_mean(self._p("tok"), toks, np.array([0, toks.size]))
        return dc.reshape(pooled, (self.cfg.embedding_dim,))

    # batched path -----------------------------------------------------------

    def paragraph_vectors(self, batch: CaseBatch) -> Tensor:
        B, P = batch.mask.shape
        flat = dc.segment_mean(self._p("tok"), batch.tokens, batch.offsets)
        return dc.reshape(flat, (B, P, self.cfg.embedding_dim))

    def contextualize(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """Self-attention over paragraphs; ``mask`` (B, P) marks real paragraphs."""
        B, P, d = x.shape
        if P > self.cfg.max_paragraphs:
            raise dc.ShapeError("contextualize", x.shape, detail=f"more than {self.cfg.max_paragraphs} paragraphs")
        H = self.cfg.attention_heads
        dh = d // H
        pos = dc.reshape(dc.take_rows(self._p("pos"), np.arange(P)), (1, P, d))
        h = dc.add(x, pos)
        key_mask = mask[:, None, None, :]
        for layer in range(self.cfg.contextualizer_layers):
            q = f"l{layer}."

            def heads(t: Tensor) -> Tensor:
                return dc.transpose(dc.reshape(t, (B, P, H, dh)), (0, 2, 1, 3))

            a_in = dc.layer_norm(h, self._p(q + "ln1.g"), self._p(q + "ln1.b"))
            qh = heads(dc.matmul(a_in, self._p(q + "wq")))
            kh = heads(dc.matmul(a_in, self._p(q + "wk")))
            vh = heads(dc.matmul(a_in, self._p(q + "wv")))
            scores = dc.scale(dc.matmul(qh, dc.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
            att = dc.softmax(scores, mask=key_mask)
            ctx = dc.reshape(dc.transpose(dc.matmul(att, vh), (0, 2, 1, 3)), (B, P, d))
            h = dc.add(h, dc.matmul(ctx, self._p(q + "wo")))
            f_in = dc.layer_norm(h, self._p(q + "ln2.g"), self._p(q + "ln2.b"))
            ff = dc.relu(dc.add(dc.matmul(f_in, self._p(q + "w1")), self._p(q + "b1")))
            h = dc.add(h, dc.add(dc.matmul(ff, self._p(q + "w2")), self._p(q + "b2")))
        return h

    def encode(self, batch: CaseBatch) -> Tensor:
        """Case representations (B, d): max over contextualized paragraphs."""
        h = self.contextualize(self.paragraph_vectors(batch), batch.mask)
        return dc.max_pool_rows(h, batch.mask)

    def case_representation(self, case: CaseRecord) -> np.ndarray:
        with dc.no_grad():
            return self.encode(make_batch([case], self.cfg)).data[0].copy()

    def embed_cases(self, cases: Sequence[CaseRecord], batch_size: int = 256) -> np.ndarray:
        """Frozen forward pass returning an (n, d) array."""
        out = np.zeros((len(cases), self.cfg.embedding_dim))
        with dc.no_grad():
            for start in range(0, len(cases), batch_size):
                chunk = cases[start:start + batch_size]
                out[start:start + len(chunk)] = self.encode(make_batch(chunk, self.cfg)).data
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite case embedding")
        return out


class OutcomeHead:
    """Linear layer producing one logit per label."""

    def __init__(self, store: ParameterStore, prefix: str, dim: int, n_labels: int,
                 rng: np.random.Generator | None = None):
        self.store = store
        self.prefix = prefix
        self.n_labels = n_labels
        if rng is not None:
            store.add(prefix + "w", _normal(rng, (dim, n_labels), 1.0 / math.sqrt(dim)))
            store.add(prefix + "b", np.zeros(n_labels))

    def logits(self, h: Tensor) -> Tensor:
        return dc.add(dc.matmul(h, self.store[self.prefix + "w"]), self.store[self.prefix + "b"])

    def classify(self, h: Tensor) -> Tensor:
        """Per-label probabilities p(l_j = 1)."""
        return dc.sigmoid(self.logits(h))


def predict(probabilities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(probabilities) > threshold


def ljp_loss(probabilities: Tensor, gold) -> Tensor:
    """BCE summed over labels, averaged over cases, from probabilities."""
    y = np.asarray(gold, dtype=np.float64)
    if probabilities.shape != y.shape:
        raise dc.ShapeError("ljp_loss", probabilities.shape, y.shape)
    eps = 1e-12
    p = probabilities
    pos = dc.mul(dc.log(dc.add(p, eps)), y)
    neg = dc.mul(dc.log(dc.add(dc.scale(p, -1.0), 1.0 + eps)), 1.0 - y)
    n_rows = max(y.size // max(y.shape[-1], 1), 1)
    return dc.scale(dc.sum(dc.add(pos, neg)), -1.0 / n_rows)


def ljp_loss_from_logits(logits: Tensor, gold) -> Tensor:
    """Same loss as :func:`ljp_loss`, computed stably from logits (used for training)."""
    return dc.bce_with_logits(logits, np.asarray(gold, dtype=np.float64))
