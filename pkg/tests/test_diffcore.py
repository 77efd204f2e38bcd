import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import gradcheck
from precedent import diffcore as dc
from precedent.diffcore import CheckpointError, ParameterStore, Tensor


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("name", gradcheck.OP_NAMES)
def test_op_gradients(name, seed):
    assert gradcheck.op_trial(name, seed).error <= gradcheck.TOL


@pytest.mark.parametrize("seed", range(2))
@pytest.mark.parametrize("name", list(gradcheck.COMPOSITES))
def test_module_gradients(name, seed):
    assert gradcheck.composite_trial(name, seed).error <= gradcheck.TOL


class TestForwardRegistry:
    def test_named_ops(self):
        a = Tensor(np.array([[1.0, 2.0]]))
        assert dc.forward_op("scale", a, 3.0).data.tolist() == [[3.0, 6.0]]
        assert dc.forward_op("dot", a, a).data.tolist() == [5.0]

    def test_unknown_op(self):
        with pytest.raises(KeyError, match="unknown op"):
            dc.forward_op("conv2d", Tensor(np.zeros(1)))

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            dc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_softmax_all_masked_row(self):
        with pytest.raises(dc.ShapeError):
            dc.softmax(Tensor(np.zeros((2, 3))), mask=np.array([[True, False, False], [False] * 3]))

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(dc.ShapeError):
            dc.backward(dc.scale(x, 2.0))

    def test_no_grad_builds_no_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with dc.no_grad():
            y = dc.sum(dc.exp(x))
        assert not y.requires_grad
        assert dc.backward(y) == {}

    def test_gradients_accumulate(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        dc.backward(dc.sum(dc.mul(x, x)))
        dc.backward(dc.sum(dc.mul(x, x)))
        assert x.grad.tolist() == [8.0]

    def test_accumulate_false_leaves_grad(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        grads = dc.backward(dc.sum(dc.mul(x, x)), accumulate=False)
        assert x.grad is None
        assert grads[id(x)].tolist() == [4.0]

    def test_shared_subgraph_counts_twice(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = dc.exp(x)
        dc.backward(dc.sum(dc.add(y, y)))
        assert x.grad[0] == pytest.approx(2 * math.exp(3.0))


class TestLosses:
    def test_kl_example_high_precision(self):
        mpmath.mp.dps = 40
        expected = float(mpmath.mpf("0.75") * mpmath.log(mpmath.mpf("1.5")) + mpmath.mpf("0.25") * mpmath.log(mpmath.mpf("0.5")))
        got = dc.kl_divergence(np.array([0.75, 0.25]), Tensor(np.array([0.5, 0.5]))).item()
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.1308, abs=1e-4)

    def test_kl_zero_target_terms(self):
        s = Tensor(np.array([0.5, 0.5]))
        assert dc.kl_divergence(np.array([1.0, 0.0]), s).item() == pytest.approx(math.log(2.0))

    def test_kl_floor_has_no_gradient(self):
        s = Tensor(np.array([1.0, 0.0]), requires_grad=True)
        dc.backward(dc.kl_divergence(np.array([0.5, 0.5]), s))
        assert s.grad[1] == 0.0
        assert np.isfinite(dc.kl_divergence(np.array([0.5, 0.5]), Tensor(np.array([1.0, 0.0]))).item())

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31))
    def test_kl_nonnegative(self, k, seed):
        r = np.random.default_rng(seed)
        a, s = r.dirichlet(np.ones(k)), r.dirichlet(np.ones(k))
        assert dc.kl_divergence(a, Tensor(s)).item() >= -1e-15
        assert abs(dc.kl_divergence(a, Tensor(a.copy())).item()) < 1e-12

    def test_bce_matches_reference(self, rng):
        z = rng.normal(size=(4, 3))
        y = rng.random((4, 3)) < 0.5
        p = 1 / (1 + np.exp(-z))
        ref = -(y * np.log(p) + (1 - y) * np.log(1 - p)).sum(1).mean()
        assert dc.bce_with_logits(Tensor(z), y).item() == pytest.approx(ref, rel=1e-12)

    def test_bce_extreme_logits_finite(self):
        assert np.isfinite(dc.bce_with_logits(Tensor(np.array([[800.0, -800.0]])), np.array([[0.0, 1.0]])).item())

    def test_euclidean_subgradient_at_zero(self):
        a = Tensor(np.ones((1, 3)), requires_grad=True)
        d = dc.euclidean_distance(a, Tensor(np.ones((1, 3))))
        dc.backward(dc.sum(d))
        assert d.item() == 0.0
        assert np.all(a.grad == 0)

    def test_layer_norm_zero_variance_row(self):
        x = Tensor(np.full((2, 4), 3.0))
        out = dc.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.all(np.isfinite(out.data)) and np.allclose(out.data, 0.0)


class TestAdam:
    def test_schedule_shape(self):
        assert dc.scheduled_lr(1.0, 0, 10, 100) == 0.0
        assert dc.scheduled_lr(1.0, 10, 10, 100) == pytest.approx(1.0)
        assert dc.scheduled_lr(1.0, 55, 10, 100) == pytest.approx(0.5)
        assert dc.scheduled_lr(1.0, 100, 10, 100) == pytest.approx(0.0)
        with pytest.raises(ValueError):
            dc.scheduled_lr(0.0, 0, 0, 0)

    def test_first_step_moves_by_lr(self):
        store = ParameterStore()
        p = store.add("w", np.array([1.0, -1.0]))
        p.grad = np.array([0.3, -5.0])
        dc.adam_step(store, 0.01)
        np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-9)

    def test_skips_missing_gradients(self):
        store = ParameterStore()
        a, b = store.add("a", np.zeros(2)), store.add("b", np.zeros(2))
        a.grad = np.ones(2)
        dc.adam_step(store, 0.1)
        assert "b" not in store.m and np.all(b.data == 0)

    def test_quadratic_converges(self):
        store = ParameterStore()
        x = store.add("x", np.array([5.0, -3.0]))
        for _ in range(500):
            store.zero_grad()
            dc.backward(dc.sum(dc.mul(x, x)))
            dc.adam_step(store, 0.05)
        assert np.abs(x.data).max() < 1e-2


class TestParameterStore:
    def test_duplicate_name(self):
        store = ParameterStore()
        store.add("w", np.zeros(1))
        with pytest.raises(KeyError):
            store.add("w", np.zeros(1))

    def test_subset_shares_tensors_with_fresh_state(self):
        store = ParameterStore()
        store.add("enc.w", np.zeros(2))
        store.add("ret.w", np.zeros(2))
        store.step = 7
        sub = store.subset(["ret."])
        assert sub.names() == ["ret.w"] and sub.step == 0
        assert sub["ret.w"] is store["ret.w"]

    def test_set_trainable(self):
        store = ParameterStore()
        store.add("enc.w", np.zeros(2))
        store.add("fus.w", np.zeros(2))
        store.set_trainable(["fus."])
        assert not store["enc.w"].requires_grad and store["fus.w"].requires_grad

    def test_checksum_tracks_values(self):
        store = ParameterStore()
        store.add("a.w", np.zeros(2))
        before = store.checksum("a.")
        store["a.w"].data = np.ones(2)
        assert store.checksum("a.") != before


class TestCheckpoint:
    def make(self, rng):
        store = ParameterStore(step=3)
        store.add("enc.tok", rng.normal(size=(4, 3)))
        store.add("head.b", rng.normal(size=2))
        store.m["head.b"] = rng.normal(size=2)
        store.v["head.b"] = rng.random(2)
        return store

    def test_roundtrip_bitwise(self, tmp_path, rng):
        store = self.make(rng)
        dc.save_checkpoint(store, tmp_path / "x.ckpt")
        back = dc.load_checkpoint(tmp_path / "x.ckpt")
        assert back.names() == store.names() and back.step == 3
        for n in store.names():
            assert back[n].data.tobytes() == store[n].data.tobytes()
        assert back.m["head.b"].tobytes() == store.m["head.b"].tobytes()
        assert "enc.tok" not in back.m

    def test_prefix_filter(self, tmp_path, rng):
        dc.save_checkpoint(self.make(rng), tmp_path / "x.ckpt", prefix="head.")
        assert dc.load_checkpoint(tmp_path / "x.ckpt").names() == ["head.b"]

    @pytest.mark.parametrize("damage", ["truncate", "trailing", "magic"])
    def test_corruption_detected(self, tmp_path, rng, damage):
        path = tmp_path / "x.ckpt"
        dc.save_checkpoint(self.make(rng), path)
        blob = path.read_bytes()
        if damage == "truncate":
            blob = blob[:-5]
        elif damage == "trailing":
            blob = blob + b"\0"
        else:
            blob = b"XXXX" + blob[4:]
        path.write_bytes(blob)
        with pytest.raises(CheckpointError):
            dc.load_checkpoint(path)
