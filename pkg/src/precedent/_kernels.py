"""Hot inner loops, each with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``PRECEDENT_DISABLE_NUMBA`` is
unset (or ``0``).  Both paths return identical results up to floating-point
summation order; ``tests/test_kernels.py`` checks them against each other and
``benchmarks/bench_kernels.py`` times them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_DISABLED = os.environ.get("PRECEDENT_DISABLE_NUMBA", "0").strip().lower() in {"1", "true", "yes", "on"}
HAVE_NUMBA = numba is not None
BACKEND = "numba" if (HAVE_NUMBA and not _DISABLED) else "numpy"


def set_backend(name: str) -> str:
    """Switch the dispatch backend at runtime; returns the previous one."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    previous, BACKEND = BACKEND, name
    return previous


def _njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------
# segment mean (embedding bag): out[s] = mean(table[tokens[offsets[s]:offsets[s+1]]])
# empty segments produce a zero row
# --------------------------------------------------------------------------


def _segment_mean_np(table, tokens, offsets):
    n_seg = offsets.shape[0] - 1
    counts = np.diff(offsets)
    out = np.zeros((n_seg, table.shape[1]), dtype=np.float64)
    if tokens.shape[0] == 0:
        return out
    nonempty = counts > 0
    # reduceat misbehaves on empty segments, so reduce only the non-empty starts
    sums = np.add.reduceat(table[tokens], offsets[:-1][nonempty], axis=0)
    out[nonempty] = sums / counts[nonempty, None]
    return out


@_njit
def _segment_mean_nb(table, tokens, offsets):
    n_seg = offsets.shape[0] - 1
    dim = table.shape[1]
    out = np.zeros((n_seg, dim), dtype=np.float64)
    for s in range(n_seg):
        lo = offsets[s]
        hi = offsets[s + 1]
        if hi <= lo:
            continue
        for t in range(lo, hi):
            row = tokens[t]
            for c in range(dim):
                out[s, c] += table[row, c]
        inv = 1.0 / (hi - lo)
        for c in range(dim):
            out[s, c] *= inv
    return out


def _segment_mean_backward_np(grad, tokens, offsets, n_rows):
    counts = np.diff(offsets)
    out = np.zeros((n_rows, grad.shape[1]), dtype=np.float64)
    if tokens.shape[0] == 0:
        return out
    seg_of_token = np.repeat(np.arange(counts.shape[0]), counts)
    scaled = grad[seg_of_token] / counts[seg_of_token, None]
    np.add.at(out, tokens, scaled)
    return out


@_njit
def _segment_mean_backward_nb(grad, tokens, offsets, n_rows):
    n_seg = offsets.shape[0] - 1
    dim = grad.shape[1]
    out = np.zeros((n_rows, dim), dtype=np.float64)
    for s in range(n_seg):
        lo = offsets[s]
        hi = offsets[s + 1]
        if hi <= lo:
            continue
        inv = 1.0 / (hi - lo)
        for t in range(lo, hi):
            row = tokens[t]
            for c in range(dim):
                out[row, c] += grad[s, c] * inv
    return out


def segment_mean(table: np.ndarray, tokens: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    if BACKEND == "numba":
        return _segment_mean_nb(table, tokens, offsets)
    return _segment_mean_np(table, tokens, offsets)


def segment_mean_backward(grad: np.ndarray, tokens: np.ndarray, offsets: np.ndarray, n_rows: int) -> np.ndarray:
    if BACKEND == "numba":
        return _segment_mean_backward_nb(grad, tokens, offsets, n_rows)
    return _segment_mean_backward_np(grad, tokens, offsets, n_rows)


# --------------------------------------------------------------------------
# exact kNN scan
# Ranking key is (euclidean distance, id_rank).  Excluded entries never
# appear.  Missing slots (shortfall) carry index -1 and distance +inf.
# Exclusions are CSR encoded: query q excludes excl_idx[excl_ptr[q]:excl_ptr[q+1]].
# --------------------------------------------------------------------------


def _knn_np(keys, queries, k, id_rank, excl_ptr, excl_idx, chunk=64):
    n, _ = keys.shape
    nq = queries.shape[0]
    out_i = np.full((nq, k), -1, dtype=np.int64)
    out_d = np.full((nq, k), np.inf, dtype=np.float64)
    for start in range(0, nq, chunk):
        stop = min(nq, start + chunk)
        diff = queries[start:stop, None, :] - keys[None, :, :]
        dist = np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))
        for row, q in enumerate(range(start, stop)):
            d = dist[row]
            excluded = excl_idx[excl_ptr[q]:excl_ptr[q + 1]]
            if excluded.size:
                d = d.copy()
                d[excluded] = np.inf
            finite = np.flatnonzero(np.isfinite(d))
            if finite.size == 0:
                continue
            take = min(k, finite.size)
            if finite.size > take:
                kth = np.partition(d[finite], take - 1)[take - 1]
                cand = finite[d[finite] <= kth]
            else:
                cand = finite
            order = np.lexsort((id_rank[cand], d[cand]))[:take]
            out_i[q, :take] = cand[order]
            out_d[q, :take] = d[cand[order]]
    return out_i, out_d


@_njit
def _knn_nb(keys, queries, k, id_rank, excl_ptr, excl_idx, chunk=64):
    n, dim = keys.shape
    nq = queries.shape[0]
    out_i = np.full((nq, k), -1, dtype=np.int64)
    out_d = np.full((nq, k), np.inf, dtype=np.float64)
    skip = np.zeros(n, dtype=np.bool_)
    for q in range(nq):
        for e in range(excl_ptr[q], excl_ptr[q + 1]):
            skip[excl_idx[e]] = True
        filled = 0
        for i in range(n):
            if skip[i]:
                continue
            acc = 0.0
            for c in range(dim):
                diff = queries[q, c] - keys[i, c]
                acc += diff * diff
            d = np.sqrt(acc)
            r = id_rank[i]
            if filled == k:
                last_d = out_d[q, k - 1]
                if d > last_d or (d == last_d and r > id_rank[out_i[q, k - 1]]):
                    continue
                pos = k - 1
            else:
                pos = filled
                filled += 1
            # insertion into the sorted prefix
            while pos > 0:
                pd = out_d[q, pos - 1]
                if pd < d or (pd == d and id_rank[out_i[q, pos - 1]] < r):
                    break
                out_d[q, pos] = pd
                out_i[q, pos] = out_i[q, pos - 1]
                pos -= 1
            out_d[q, pos] = d
            out_i[q, pos] = i
        for e in range(excl_ptr[q], excl_ptr[q + 1]):
            skip[excl_idx[e]] = False
    return out_i, out_d


def knn_scan(
    keys: np.ndarray,
    queries: np.ndarray,
    k: int,
    id_rank: np.ndarray,
    excl_ptr: np.ndarray,
    excl_idx: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    if BACKEND == "numba":
        return _knn_nb(keys, queries, k, id_rank, excl_ptr, excl_idx)
    return _knn_np(keys, queries, k, id_rank, excl_ptr, excl_idx)


# --------------------------------------------------------------------------
# pairwise Jaccard over bit-packed label sets (label space <= 64)
# both-empty pairs are defined as 0
# --------------------------------------------------------------------------


def _jaccard_np(bits_a, bits_b):
    # unpack to multi-hot and use set algebra via matrix products
    width = 64
    shifts = np.arange(width, dtype=np.uint64)
    ha = ((bits_a[:, None] >> shifts) & np.uint64(1)).astype(np.float64)
    hb = ((bits_b[:, None] >> shifts) & np.uint64(1)).astype(np.float64)
    inter = ha @ hb.T
    union = ha.sum(1)[:, None] + hb.sum(1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@_njit
def _popcount(x):
    c = 0
    while x:
        x &= x - np.uint64(1)
        c += 1
    return c


@_njit
def _jaccard_nb(bits_a, bits_b):
    na = bits_a.shape[0]
    nb = bits_b.shape[0]
    out = np.zeros((na, nb), dtype=np.float64)
    for i in range(na):
        a = bits_a[i]
        for j in range(nb):
            b = bits_b[j]
            u = _popcount(a | b)
            if u > 0:
                out[i, j] = _popcount(a & b) / u
    return out


def pairwise_jaccard(bits_a: np.ndarray, bits_b: np.ndarray) -> np.ndarray:
    bits_a = np.ascontiguousarray(bits_a, dtype=np.uint64)
    bits_b = np.ascontiguousarray(bits_b, dtype=np.uint64)
    if BACKEND == "numba":
        return _jaccard_nb(bits_a, bits_b)
    return _jaccard_np(bits_a, bits_b)


def pack_bits(multi_hot: np.ndarray) -> np.ndarray:
    """Pack an (n, A) boolean matrix (A <= 64) into uint64 words."""
    multi_hot = np.asarray(multi_hot, dtype=bool)
    if multi_hot.ndim != 2 or multi_hot.shape[1] > 64:
        raise ValueError(f"expected (n, A<=64) label matrix, got shape {multi_hot.shape}")
    weights = np.left_shift(np.uint64(1), np.arange(multi_hot.shape[1], dtype=np.uint64))
    return (multi_hot.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)
