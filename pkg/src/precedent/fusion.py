"""Precedent fusion: attend from the case representation over retrieved precedents.

Keys are precedent embeddings, values their outcome vectors.  Each layer adds
``g(softmax(q . k / sqrt(d_k)) V W_v)`` to the running representation, where
``g`` is a two-matrix feed-forward whose output matrix starts at zero, so an
untrained fusion stack is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterStore, Tensor

VARIANTS = ("mean", "cross", "stacked")
DEFAULT_LAYERS = 4


@dataclass(frozen=True)
class FusionConfig:
    variant: str = "stacked"
    layers: int = DEFAULT_LAYERS
    key_dim: int = 64
    value_dim: int = 64
    hidden_dim: int = 128

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"fusion variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.layers < 1:
            raise ValueError("fusion needs at least one layer")

    @property
    def n_layers(self) -> int:
        return {"mean": 0, "cross": 1, "stacked": self.layers}[self.variant]


@dataclass(frozen=True)
class AttentionTrace:
    """Post-softmax attention per layer: (B, L, K), or (L, K) for a single query."""

    scores: np.ndarray


def aggregate_attention(trace: AttentionTrace | np.ndarray) -> np.ndarray:
    """Mean over layers, renormalised; one distribution over precedents per query."""
    s = np.asarray(getattr(trace, "scores", trace), dtype=np.float64)
    a = s.mean(axis=-2)
    return a / a.sum(axis=-1, keepdims=True)


class Fusion:
    def __init__(self, store: ParameterStore, prefix: str, cfg: FusionConfig, embed_dim: int, n_labels: int,
                 rng: np.random.Generator | None = None):
        self.store = store
        self.prefix = prefix
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.n_labels = n_labels
        if rng is not None:
            self._init(rng)

    def _init(self, rng: np.random.Generator) -> None:
        d, A, c, p = self.embed_dim, self.n_labels, self.cfg, self.prefix
        if c.variant == "mean":
            self.store.add(p + "proj.w", np.zeros((A, d)))
            self.store.add(p + "proj.b", np.zeros(d))
            return
        for layer in range(c.n_layers):
            q = f"{p}l{layer}."
            self.store.add(q + "wq", rng.normal(0, 1 / math.sqrt(d), (d, c.key_dim)))
            self.store.add(q + "wk", rng.normal(0, 1 / math.sqrt(d), (d, c.key_dim)))
            self.store.add(q + "wv", rng.normal(0, 1 / math.sqrt(A), (A, c.value_dim)))
            self.store.add(q + "g1", rng.normal(0, 1 / math.sqrt(c.value_dim), (c.value_dim, c.hidden_dim)))
            self.store.add(q + "g1b", np.zeros(c.hidden_dim))
            self.store.add(q + "g2", np.zeros((c.hidden_dim, d)))
            self.store.add(q + "g2b", np.zeros(d))

    def _p(self, name: str) -> Tensor:
        return self.store[self.prefix + name]

    def mean_fusion(self, query: Tensor, values, mask: np.ndarray | None = None) -> Tensor:
        """query (B, d) + proj(mean of retrieved values (B, K, A))."""
        v = np.asarray(getattr(values, "data", values), dtype=np.float64)
        if v.shape[-2] == 0:
            raise ValueError("mean fusion needs at least one retrieved precedent")
        m = dc.mean_rows(Tensor(v), mask)
        return dc.add(query, dc.add(dc.matmul(m, self._p("proj.w")), self._p("proj.b")))

    def fusion_layer(self, layer: int, h_prev: Tensor, keys: Tensor, values, mask: np.ndarray | None = None
                     ) -> tuple[Tensor, np.ndarray]:
        """One residual cross-attention step; returns (h_next, attention (B, K))."""
        keys = keys if isinstance(keys, Tensor) else Tensor(keys)
        v = values if isinstance(values, Tensor) else Tensor(np.asarray(values, dtype=np.float64))
        if keys.shape[:-1] != v.shape[:-1]:
            raise dc.ShapeError("fusion_layer", keys.shape, v.shape, detail="one value vector per key required")
        if keys.shape[-2] == 0:
            raise dc.ShapeError("fusion_layer", keys.shape, detail="no precedents")
        B = h_prev.shape[0]
        q = f"l{layer}."
        dk = self.cfg.key_dim
        qv = dc.reshape(dc.matmul(h_prev, self._p(q + "wq")), (B, 1, dk))
        kk = dc.matmul(keys, self._p(q + "wk"))
        logits = dc.scale(dc.matmul(qv, dc.transpose(kk, (0, 2, 1))), 1.0 / math.sqrt(dk))
        att = dc.softmax(logits, mask=None if mask is None else mask[:, None, :])
        ctx = dc.reshape(dc.matmul(att, dc.matmul(v, self._p(q + "wv"))), (B, self.cfg.value_dim))
        hidden = dc.relu(dc.add(dc.matmul(ctx, self._p(q + "g1")), self._p(q + "g1b")))
        out = dc.add(dc.matmul(hidden, self._p(q + "g2")), self._p(q + "g2b"))
        return dc.add(h_prev, out), att.data[:, 0, :]

    def stacked_fusion(self, query: Tensor, keys, values, mask: np.ndarray | None = None
                       ) -> tuple[Tensor, AttentionTrace]:
        h = query
        rows = []
        for layer in range(self.cfg.n_layers):
            h, att = self.fusion_layer(layer, h, keys, values, mask)
            rows.append(att)
        return h, AttentionTrace(np.stack(rows, axis=1))

    def __call__(self, query: Tensor, keys, values, mask: np.ndarray | None = None
                 ) -> tuple[Tensor, AttentionTrace | None]:
        if self.cfg.variant == "mean":
            return self.mean_fusion(query, values, mask), None
        return self.stacked_fusion(query, keys, values, mask)
