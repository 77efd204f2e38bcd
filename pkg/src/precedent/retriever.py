"""Precedent retriever trained to make embedding dot products match label overlap."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from . import diffcore as dc
from .corpus import CaseRecord, Corpus
from .diffcore import ParameterStore, Tensor
from .encoder import EncoderConfig, HierarchicalEncoder, make_batch

log = logging.getLogger(__name__)

REGIMES = ("self", "binary", "lor")
N_BINS = 10
REFERENCE_PAIRS = 50_000
REFERENCE_TRAIN_CASES = 9_000


def lor(y_i, y_j) -> float:
    """Jaccard overlap of two allegation vectors; two empty sets give 0."""
    a = np.asarray(y_i, dtype=bool)
    b = np.asarray(y_j, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"label dimension mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return 0.0 if union == 0 else np.count_nonzero(a & b) / union


def lor_matrix(labels_a: np.ndarray, labels_b: np.ndarray) -> np.ndarray:
    return _kernels.pairwise_jaccard(_kernels.pack_bits(labels_a), _kernels.pack_bits(labels_b))


@dataclass(frozen=True)
class RelevanceTarget:
    regime: str
    value: float

    @classmethod
    def from_labels(cls, regime: str, y_i, y_j) -> RelevanceTarget:
        overlap = lor(y_i, y_j)
        if regime == "binary":
            return cls("binary", 1.0 if overlap > 0 else 0.0)
        if regime == "lor":
            return cls("lor", overlap)
        raise ValueError(f"regime {regime!r} has no pairwise target")


@dataclass(frozen=True)
class CasePair:
    i: str
    j: str
    lor: float

    @property
    def binary(self) -> int:
        return int(self.lor > 0)

    def target(self, regime: str) -> float:
        if regime == "lor":
            return self.lor
        if regime == "binary":
            return float(self.binary)
        raise ValueError(f"regime {regime!r} has no pairwise target")


def desk_scale_pairs(n_train: int) -> int:
    """50k pairs at 9k training cases, scaled linearly with the training split."""
    return max(1, int(round(REFERENCE_PAIRS * n_train / REFERENCE_TRAIN_CASES)))


def lor_bin(values: np.ndarray) -> np.ndarray:
    """Equal-width bins [0, .1), ..., [.9, 1.0]; 1.0 lands in the last bin."""
    return np.minimum((np.asarray(values) * N_BINS).astype(np.int64), N_BINS - 1)


def sample_pairs(corpus: Corpus, ids: Sequence[str], n_pairs: int | None, seed: int) -> list[CasePair]:
    """Draw pairs so each non-empty LOR bin is equally likely, then a pair uniformly inside it."""
    ids = list(ids)
    if len(ids) < 2:
        raise ValueError("need at least 2 cases to sample pairs")
    n_pairs = desk_scale_pairs(len(ids)) if n_pairs is None else n_pairs
    rng = np.random.default_rng(seed)
    labels = corpus.alleged_matrix(ids)
    n = len(ids)
    # bin id of every unordered pair (i < j), computed in row blocks
    members: list[list[np.ndarray]] = [[] for _ in range(N_BINS)]
    block = max(1, (1 << 21) // n)
    for start in range(0, n, block):
        rows = np.arange(start, min(n, start + block))
        bins = lor_bin(lor_matrix(labels[rows], labels))
        upper = np.arange(n)[None, :] > rows[:, None]
        flat = (rows[:, None] * n + np.arange(n)[None, :])
        for k in range(N_BINS):
            members[k].append(flat[upper & (bins == k)])
    merged = [np.concatenate(m) for m in members]
    nonempty = np.array([k for k in range(N_BINS) if merged[k].size])
    chosen_bins = rng.choice(nonempty, size=n_pairs)
    out = []
    for k in chosen_bins:
        flat = int(merged[k][rng.integers(merged[k].size)])
        i, j = divmod(flat, n)
        if rng.random() < 0.5:
            i, j = j, i
        out.append(CasePair(ids[i], ids[j], lor(corpus[ids[i]].alleged, corpus[ids[j]].alleged)))
    return out


def pairwise_loss(h_i: Tensor, h_j: Tensor, target) -> Tensor:
    """Squared error between raw dot products and relevance targets, mean over pairs."""
    t = target.value if isinstance(target, RelevanceTarget) else target
    if h_i.shape != h_j.shape:
        raise dc.ShapeError("pairwise_loss", h_i.shape, h_j.shape)
    sim = dc.dot(h_i, h_j)
    return dc.mse(sim, np.broadcast_to(np.asarray(t, dtype=np.float64), sim.shape).copy())


class Retriever:
    """Embeds cases for precedent search.

    Regimes ``binary`` and ``lor`` own a separate encoder under ``prefix``;
    ``self`` reuses the LJP encoder's case representation.
    """

    def __init__(self, regime: str, encoder: HierarchicalEncoder):
        if regime not in REGIMES:
            raise ValueError(f"retriever regime must be one of {REGIMES}, got {regime!r}")
        self.regime = regime
        self.encoder = encoder

    @classmethod
    def create(cls, regime: str, store: ParameterStore, cfg: EncoderConfig, vocab_size: int,
               rng: np.random.Generator, ljp_encoder: HierarchicalEncoder | None = None,
               prefix: str = "ret.") -> Retriever:
        if regime == "self":
            if ljp_encoder is None:
                raise ValueError("self-retrieval needs the trained LJP encoder")
            return cls(regime, ljp_encoder)
        return cls(regime, HierarchicalEncoder(store, prefix, cfg, vocab_size, rng))

    @property
    def prefix(self) -> str:
        return self.encoder.prefix

    @property
    def dim(self) -> int:
        return self.encoder.cfg.embedding_dim

    @property
    def trainable(self) -> bool:
        return self.regime != "self"

    def embed(self, batch) -> Tensor:
        return self.encoder.encode(batch)

    def retriever_embed(self, case: CaseRecord) -> np.ndarray:
        return self.encoder.case_representation(case)

    def embed_cases(self, cases: Sequence[CaseRecord], batch_size: int = 256) -> np.ndarray:
        return self.encoder.embed_cases(cases, batch_size)

    def checkpoint_id(self) -> str:
        return self.encoder.store.checksum(self.prefix)[:16]


def _pair_batch(corpus: Corpus, pairs: Sequence[CasePair]):
    uniq = sorted({p.i for p in pairs} | {p.j for p in pairs})
    where = {cid: k for k, cid in enumerate(uniq)}
    ii = np.array([where[p.i] for p in pairs])
    jj = np.array([where[p.j] for p in pairs])
    return uniq, ii, jj


def pair_loss(retriever: Retriever, corpus: Corpus, pairs: Sequence[CasePair], regime: str | None = None) -> Tensor:
    regime = regime or retriever.regime
    uniq, ii, jj = _pair_batch(corpus, pairs)
    emb = retriever.embed(make_batch(corpus.subset(uniq), retriever.encoder.cfg))
    targets = np.array([p.target(regime) for p in pairs])
    return pairwise_loss(dc.take_rows(emb, ii), dc.take_rows(emb, jj), targets)


def mean_pair_mse(retriever: Retriever, corpus: Corpus, pairs: Sequence[CasePair], batch_size: int = 256) -> float:
    regime = retriever.regime if retriever.regime != "self" else "lor"
    total = 0.0
    with dc.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            total += pair_loss(retriever, corpus, chunk, regime).item() * len(chunk)
    return total / max(len(pairs), 1)


@dataclass
class RetrieverTrainConfig:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 50
    n_pairs: int | None = None


def train_retriever(retriever: Retriever, corpus: Corpus, train_ids: Sequence[str], cfg: RetrieverTrainConfig,
                    seed: int, heldout: Sequence[CasePair] | None = None) -> dict:
    """Fit the retriever on bin-uniform pairs; returns a small history dict."""
    if not retriever.trainable:
        raise ValueError("self-retrieval has no retriever-owned parameters to train")
    store = retriever.encoder.store
    rng = np.random.default_rng(seed)
    pairs = sample_pairs(corpus, train_ids, cfg.n_pairs, seed)
    steps_per_epoch = (len(pairs) + cfg.batch_size - 1) // cfg.batch_size
    total = steps_per_epoch * cfg.epochs
    history = {"pairs": len(pairs), "train_loss": [], "heldout_mse": []}
    if heldout is not None:
        history["heldout_mse_init"] = mean_pair_mse(retriever, corpus, heldout)
    store.set_trainable([retriever.prefix])
    opt = store.subset([retriever.prefix])
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        running = 0.0
        for step in range(steps_per_epoch):
            chunk = [pairs[k] for k in order[step * cfg.batch_size:(step + 1) * cfg.batch_size]]
            loss = pair_loss(retriever, corpus, chunk)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"retriever loss became {loss.item()} at epoch {epoch}")
            store.zero_grad()
            dc.backward(loss)
            dc.adam_step(opt, cfg.lr, cfg.warmup_steps, total)
            running += loss.item()
        history["train_loss"].append(running / steps_per_epoch)
        if heldout is not None:
            history["heldout_mse"].append(mean_pair_mse(retriever, corpus, heldout))
        log.info("retriever epoch %d loss %.4f", epoch, history["train_loss"][-1])
    store.zero_grad()
    store.set_trainable(())
    return history
