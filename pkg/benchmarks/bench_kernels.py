"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once on each backend to warm up (JIT compile), then the best of
``--repeat`` timings is reported together with the max absolute difference
between the two backends' outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from precedent import _kernels as K


def best_time(fn, repeat: int) -> float:
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng: np.random.Generator):
    # embedding bag: 2000 paragraphs of ~20 tokens over a 500 x 64 table
    table = rng.normal(size=(500, 64))
    lengths = rng.integers(5, 36, 2000)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    tokens = rng.integers(0, 500, offsets[-1]).astype(np.int64)
    grad = rng.normal(size=(2000, 64))
    yield "segment_mean", lambda: K.segment_mean(table, tokens, offsets)
    yield "segment_mean_backward", lambda: K.segment_mean_backward(grad, tokens, offsets, 500)

    # exact kNN: 200 queries against 1600 keys of dim 64, k = 64, a few exclusions each
    keys = rng.normal(size=(1600, 64))
    queries = rng.normal(size=(200, 64))
    id_rank = rng.permutation(1600).astype(np.int64)
    excl_idx = rng.integers(0, 1600, 200).astype(np.int64)
    excl_ptr = np.arange(201, dtype=np.int64)
    yield "knn_scan", lambda: K.knn_scan(keys, queries, 64, id_rank, excl_ptr, excl_idx)

    # label overlap: 1600 x 1600 packed label sets
    bits = K.pack_bits(rng.random((1600, 10)) < 0.25)
    yield "pairwise_jaccard", lambda: K.pairwise_jaccard(bits, bits)


def max_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    finite = np.isfinite(a) & np.isfinite(b)
    return float(np.max(np.abs(a[finite] - b[finite]), initial=0.0))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    original = K.BACKEND
    print(f"{'kernel':<24}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max diff':>12}")
    try:
        for name, fn in cases(np.random.default_rng(args.seed)):
            timings, outputs = {}, {}
            for backend in ("numpy", "numba"):
                K.set_backend(backend)
                timings[backend] = best_time(fn, args.repeat)
                outputs[backend] = fn()
            speedup = timings["numpy"] / timings["numba"]
            print(f"{name:<24}{1e3 * timings['numpy']:>12.2f}{1e3 * timings['numba']:>12.2f}{speedup:>9.1f}x"
                  f"{max_diff(outputs['numpy'], outputs['numba']):>12.1e}")
    finally:
        K.set_backend(original)


if __name__ == "__main__":
    main()
