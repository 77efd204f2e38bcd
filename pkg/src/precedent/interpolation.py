"""Inference-time precedent use: per-label kNN outcome estimates mixed with the model."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metrics import f1_scores, hard_macro_f1, lor_at_k

DEFAULT_LAMBDAS = tuple(round(0.1 * i, 1) for i in range(11))
DEFAULT_KS = (8, 16, 32, 64, 128, 256)
DEFAULT_TAUS = (0.1, 1.0, 10.0)
REPORT_COLUMNS = ("k", "lambda", "tau", "task", "micro_f1", "macro_f1", "hard_macro_f1", "lor_at_k")


@dataclass(frozen=True)
class InterpolationConfig:
    k: int = 8
    tau: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        _check_lambda(self.lam)


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")


@dataclass(frozen=True)
class LabelDistribution:
    """Per-label binary distribution (p1 = P[label present], p0 = 1 - p1)."""

    p1: np.ndarray
    p0: np.ndarray

    @classmethod
    def from_p1(cls, p1) -> LabelDistribution:
        p1 = np.asarray(p1, dtype=np.float64)
        return cls(p1, 1.0 - p1)

    def predict(self, threshold: float = 0.5) -> np.ndarray:
        return self.p1 > threshold


def knn_weights(distances: np.ndarray, tau: float, valid: np.ndarray | None = None) -> np.ndarray:
    """Softmax of -distance / tau along the last axis, shifted by the row minimum."""
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    d = np.asarray(distances, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(d)
    if not np.all(valid.any(axis=-1)):
        raise ValueError("each query needs at least one neighbor")
    shifted = np.where(valid, d, np.inf)
    shifted = shifted - shifted.min(axis=-1, keepdims=True)
    w = np.where(valid, np.exp(-shifted / tau), 0.0)
    return w / w.sum(axis=-1, keepdims=True)


def p_knn(distances, values, tau: float, valid: np.ndarray | None = None) -> LabelDistribution:
    """Per-label kNN distribution.

    ``distances`` (..., K) and ``values`` (..., K, A).  For label j,
    p1_j is the weight share of neighbors carrying j, p0_j the share of
    neighbors without it; the denominator is the full retrieved set.
    """
    d = np.asarray(distances, dtype=np.float64)
    v = np.asarray(values, dtype=bool)
    if d.shape[-1] == 0:
        raise ValueError("empty neighbor list")
    if v.shape[:-1] != d.shape:
        raise ValueError(f"values {v.shape} do not match distances {d.shape}")
    w = knn_weights(d, tau, valid)
    p1 = np.einsum("...k,...ka->...a", w, v.astype(np.float64))
    p0 = np.einsum("...k,...ka->...a", w, (~v).astype(np.float64))
    return LabelDistribution(p1, p0)


def p_knn_from_neighbors(neighbors, tau: float) -> LabelDistribution:
    """Convenience form over a ranked ``KnnResult`` / sequence of neighbors."""
    neighbors = list(getattr(neighbors, "neighbors", neighbors))
    if not neighbors:
        raise ValueError("empty neighbor list")
    return p_knn(np.array([n.distance for n in neighbors]), np.stack([n.value for n in neighbors]), tau)


def interpolate(p_baseline: LabelDistribution, p_nn: LabelDistribution, lam: float) -> LabelDistribution:
    """lam * baseline + (1 - lam) * kNN for both outcomes of every label."""
    _check_lambda(lam)
    if p_baseline.p1.shape != p_nn.p1.shape:
        raise ValueError(f"distribution shapes differ: {p_baseline.p1.shape} vs {p_nn.p1.shape}")
    mix = 1.0 - lam
    return LabelDistribution(lam * p_baseline.p1 + mix * p_nn.p1, lam * p_baseline.p0 + mix * p_nn.p0)


@dataclass
class SweepResult:
    best: InterpolationConfig
    best_row: dict
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in REPORT_COLUMNS})
        return buf.getvalue()


def sweep(
    baseline_p1: np.ndarray,
    neighbor_idx: np.ndarray,
    neighbor_dist: np.ndarray,
    store_values: np.ndarray,
    gold: np.ndarray,
    task: str,
    alleged: np.ndarray | None = None,
    query_alleged: np.ndarray | None = None,
    store_alleged: np.ndarray | None = None,
    k_grid: Sequence[int] = DEFAULT_KS,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDAS,
    tau_grid: Sequence[float] = DEFAULT_TAUS,
) -> SweepResult:
    """Grid search over (k, lambda, tau), scored by validation macro-F1.

    ``neighbor_idx`` / ``neighbor_dist`` are the ranked top-max(k) results
    per query (index -1 / inf where the store ran short); smaller k reuses
    the prefix.  Ties prefer smaller lambda, then smaller k, then smaller tau.
    """
    baseline_p1 = np.asarray(baseline_p1, dtype=np.float64)
    if baseline_p1.shape[0] == 0:
        raise ValueError("empty validation split")
    for lam in lambda_grid:
        _check_lambda(lam)
    if neighbor_idx.shape[1] < max(k_grid):
        raise ValueError(f"need top-{max(k_grid)} neighbors, got {neighbor_idx.shape[1]}")
    base = LabelDistribution.from_p1(baseline_p1)
    rows = []
    best_key, best = None, None
    for k in sorted(k_grid):
        idx = neighbor_idx[:, :k]
        valid = idx >= 0
        vals = np.asarray(store_values, dtype=bool)[np.where(valid, idx, 0)]
        lor = None
        if query_alleged is not None and store_alleged is not None:
            lor = lor_at_k(query_alleged, np.asarray(store_alleged, bool)[np.where(valid, idx, 0)], valid)
        for tau in sorted(tau_grid):
            nn = p_knn(np.where(valid, neighbor_dist[:, :k], np.inf), vals, tau, valid)
            for lam in sorted(lambda_grid):
                final = interpolate(base, nn, lam)
                pred = final.predict()
                micro, macro, _ = f1_scores(pred, gold)
                hard = hard_macro_f1(pred, gold, alleged) if task == "A" and alleged is not None else None
                row = {"k": k, "lambda": lam, "tau": tau, "task": task, "micro_f1": micro,
                       "macro_f1": macro, "hard_macro_f1": hard, "lor_at_k": lor}
                rows.append(row)
                key = (-macro, lam, k, tau)
                if best_key is None or key < best_key:
                    best_key, best = key, row
    return SweepResult(InterpolationConfig(best["k"], best["tau"], best["lambda"]), best, rows)
