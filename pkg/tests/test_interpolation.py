import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from precedent.datastore import DatastoreSnapshot
from precedent.interpolation import (
    InterpolationConfig,
    LabelDistribution,
    interpolate,
    knn_weights,
    p_knn,
    p_knn_from_neighbors,
    sweep,
)


def oracle_example() -> float:
    mpmath.mp.dps = 40
    e = [mpmath.exp(-mpmath.mpf(d)) for d in (1, 2, 3)]
    return float((e[0] + e[1]) / (e[0] + e[1] + e[2]))


class TestKnn:
    def test_derived_example(self):
        got = p_knn(np.array([1.0, 2.0, 3.0]), np.array([[1], [1], [0]], bool), tau=1.0)
        assert got.p1[0] == pytest.approx(oracle_example(), abs=1e-12)
        assert got.p1[0] == pytest.approx(0.9100, abs=1e-4)
        assert got.p0[0] == pytest.approx(1 - oracle_example(), abs=1e-12)

    def test_single_neighbor(self):
        got = p_knn(np.array([4.2]), np.array([[1, 0]], bool), tau=0.1)
        assert got.p1.tolist() == [1.0, 0.0]

    def test_far_neighbors_do_not_underflow(self):
        w = knn_weights(np.array([1e4, 1e4 + 1.0]), tau=0.1)
        assert np.isfinite(w).all() and w.sum() == pytest.approx(1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 10), st.floats(0.05, 20), st.integers(0, 2**31))
    def test_distribution(self, k, tau, seed):
        r = np.random.default_rng(seed)
        d = np.sort(r.random(k) * 5)
        v = r.random((k, 4)) < 0.5
        got = p_knn(d, v, tau)
        np.testing.assert_allclose(got.p1 + got.p0, 1.0, atol=1e-12)
        assert knn_weights(d, tau).sum() == pytest.approx(1.0)
        assert np.all(np.diff(knn_weights(d, tau)) <= 1e-15)  # nearer never weighs less

    def test_validation(self):
        with pytest.raises(ValueError):
            knn_weights(np.array([1.0]), tau=0.0)
        with pytest.raises(ValueError):
            p_knn(np.zeros(0), np.zeros((0, 2), bool), 1.0)
        with pytest.raises(ValueError):
            InterpolationConfig(lam=1.5)

    def test_from_neighbors(self):
        snap = DatastoreSnapshot(np.array([[1.0], [2.0], [3.0]]), np.array([[1], [1], [0]], bool), ["a", "b", "c"], 0)
        res = snap.query_knn(np.array([0.0]), 3)
        assert p_knn_from_neighbors(res, 1.0).p1[0] == pytest.approx(oracle_example(), abs=1e-12)
        with pytest.raises(ValueError):
            p_knn_from_neighbors([], 1.0)


class TestInterpolate:
    def test_lambda_one_is_baseline_bitwise(self, rng):
        base = LabelDistribution.from_p1(rng.random((5, 3)))
        nn = LabelDistribution.from_p1(rng.random((5, 3)))
        out = interpolate(base, nn, 1.0)
        assert out.p1.tobytes() == base.p1.tobytes() and out.p0.tobytes() == base.p0.tobytes()

    def test_lambda_zero_single_label_bearing_neighbor(self):
        nn = p_knn(np.array([0.7]), np.array([[1]], bool), 1.0)
        out = interpolate(LabelDistribution.from_p1(np.array([0.1])), nn, 0.0)
        assert out.p1[0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            interpolate(LabelDistribution.from_p1(np.zeros(2)), LabelDistribution.from_p1(np.zeros(3)), 0.5)


class TestSweep:
    def setup_data(self, rng, n=30, A=3, K=16):
        gold = rng.random((n, A)) < 0.4
        idx = np.tile(np.arange(K), (n, 1))
        dist = np.sort(rng.random((n, K)), axis=1)
        values = rng.random((K, A)) < 0.5
        return rng.random((n, A)), idx, dist, values, gold

    def test_grid_and_tiebreak(self, rng):
        base, idx, dist, values, gold = self.setup_data(rng)
        res = sweep(base, idx, dist, values, gold, "B", k_grid=(4, 8), lambda_grid=(0.0, 0.5, 1.0), tau_grid=(1.0,))
        assert len(res.rows) == 6
        best = max(r["macro_f1"] for r in res.rows)
        tied = [r for r in res.rows if r["macro_f1"] == best]
        first = min(tied, key=lambda r: (r["lambda"], r["k"], r["tau"]))
        assert (res.best.k, res.best.lam, res.best.tau) == (first["k"], first["lambda"], first["tau"])
        assert res.to_csv().splitlines()[0].startswith("k,lambda,tau")

    def test_lambda_one_only_reproduces_baseline(self, rng):
        from precedent.metrics import f1_scores

        base, idx, dist, values, gold = self.setup_data(rng)
        res = sweep(base, idx, dist, values, gold, "B", k_grid=(8,), lambda_grid=(1.0,), tau_grid=(1.0,))
        assert res.best_row["macro_f1"] == f1_scores(base > 0.5, gold)[1]

    def test_needs_enough_neighbors(self, rng):
        base, idx, dist, values, gold = self.setup_data(rng, K=4)
        with pytest.raises(ValueError):
            sweep(base, idx, dist, values, gold, "B", k_grid=(8,))
