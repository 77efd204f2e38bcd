"""Multi-label F1 scores, hard-macro-F1 over alleged articles, and retrieval LOR."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels


def _as_matrix(x, name: str) -> np.ndarray:
    m = np.asarray(x, dtype=bool)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a (cases, labels) matrix, got shape {m.shape}")
    return m


def _f1(tp, fp, fn) -> np.ndarray:
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    den = 2 * tp + fp + fn
    out = np.zeros_like(den)
    np.divide(2 * tp, den, out=out, where=den > 0)
    return out


@dataclass
class LabelCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def of(cls, pred: np.ndarray, gold: np.ndarray) -> LabelCounts:
        return cls((pred & gold).sum(0), (pred & ~gold).sum(0), (~pred & gold).sum(0))


def f1_scores(predictions, gold) -> tuple[float, float, np.ndarray]:
    """(micro, macro, per-label F1); a label with no TP, FP or FN scores 0."""
    pred = _as_matrix(predictions, "predictions")
    gold = _as_matrix(gold, "gold")
    if pred.shape != gold.shape:
        raise ValueError(f"predictions {pred.shape} and gold {gold.shape} differ")
    c = LabelCounts.of(pred, gold)
    per = _f1(c.tp, c.fp, c.fn)
    micro = float(_f1(c.tp.sum(), c.fp.sum(), c.fn.sum()))
    macro = float(per.mean()) if per.size else 0.0
    return micro, macro, per


def hard_macro_f1(predictions, gold_violated, gold_alleged, return_detail: bool = False):
    """Mean per-article F1 over cases where the article was alleged.

    Positives are violations, negatives alleged-but-not-violated.  Articles
    never alleged are left out of the mean.
    """
    pred = _as_matrix(predictions, "predictions")
    vio = _as_matrix(gold_violated, "gold_violated")
    alg = _as_matrix(gold_alleged, "gold_alleged")
    if not (pred.shape == vio.shape == alg.shape):
        raise ValueError(f"dimension mismatch: {pred.shape}, {vio.shape}, {alg.shape}")
    # a case counts for article j only if j was alleged
    p = pred & alg
    g = vio & alg
    tp = (p & g).sum(0)
    fp = (p & ~g & alg).sum(0)
    fn = (~p & g).sum(0)
    per = _f1(tp, fp, fn)
    counted = alg.sum(0)
    included = counted > 0
    value = float(per[included].mean()) if included.any() else 0.0
    if return_detail:
        return value, {"per_label": per, "included": included, "cases_per_label": counted,
                       "excluded_labels": np.flatnonzero(~included).tolist()}
    return value


def lor_at_k(query_alleged: np.ndarray, retrieved_alleged: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Mean over queries of the mean Jaccard overlap with their retrieved cases.

    ``retrieved_alleged`` is (n_queries, k, A); ``valid`` (n_queries, k) masks
    missing neighbors.
    """
    q = np.asarray(query_alleged, dtype=bool)
    r = np.asarray(retrieved_alleged, dtype=bool)
    n, k, _ = r.shape
    if n == 0:
        raise ValueError("no queries")
    qb = _kernels.pack_bits(q)
    rb = _kernels.pack_bits(r.reshape(n * k, -1)).reshape(n, k)
    scores = np.zeros((n, k))
    for i in range(n):
        scores[i] = _kernels.pairwise_jaccard(qb[i:i + 1], rb[i])[0]
    if valid is None:
        valid = np.ones((n, k), dtype=bool)
    per_query = (scores * valid).sum(1) / np.maximum(valid.sum(1), 1)
    return float(per_query.mean())


def lor_metric(query_alleged: np.ndarray, query_embeddings: np.ndarray, snapshot, store_alleged: np.ndarray,
               k: int, exclude: Sequence | None = None) -> float:
    """LOR@k of the retriever: search ``snapshot`` with ``query_embeddings``.

    ``store_alleged`` holds the alleged labels of the stored cases (row-aligned
    with the snapshot); the snapshot's own values may be violation vectors.
    """
    if len(snapshot) == 0:
        raise ValueError("empty datastore")
    idx, _ = snapshot.search(query_embeddings, k, exclude)
    valid = idx >= 0
    retrieved = np.asarray(store_alleged, dtype=bool)[np.where(valid, idx, 0)]
    return lor_at_k(query_alleged, retrieved, valid)


@dataclass
class EvalReport:
    task: str
    micro_f1: float
    macro_f1: float
    hard_macro_f1: float | None = None
    lor_at_k: float | None = None
    per_label_f1: list[float] = field(default_factory=list)
    counts: dict[str, list[int]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "task": self.task,
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "hard_macro_f1": self.hard_macro_f1,
            "lor_at_k": self.lor_at_k,
        }

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["task", "macro_f1", "micro_f1", "hard_macro_f1", "lor_at_k", "label", "f1", "tp", "fp", "fn"])
        for j, f in enumerate(self.per_label_f1):
            w.writerow([self.task, _fmt(self.macro_f1), _fmt(self.micro_f1), _fmt(self.hard_macro_f1),
                        _fmt(self.lor_at_k), j, _fmt(f), self.counts["tp"][j], self.counts["fp"][j], self.counts["fn"][j]])
        return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def evaluate(predictions, gold, task: str, alleged=None, lor: float | None = None) -> EvalReport:
    """Task A reports hard-macro-F1 as well (needs ``alleged``)."""
    pred = _as_matrix(predictions, "predictions")
    gold = _as_matrix(gold, "gold")
    micro, macro, per = f1_scores(pred, gold)
    c = LabelCounts.of(pred, gold)
    hard = None
    if task == "A":
        if alleged is None:
            raise ValueError("Task A evaluation needs the alleged labels for hard-macro-F1")
        hard = hard_macro_f1(pred, gold, alleged)
    return EvalReport(task, micro, macro, hard, lor, per.tolist(),
                      {"tp": c.tp.tolist(), "fp": c.fp.tolist(), "fn": c.fn.tolist()})
