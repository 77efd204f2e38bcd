import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from precedent.datastore import DatastoreSnapshot
from precedent.metrics import EvalReport, evaluate, f1_scores, hard_macro_f1, lor_at_k, lor_metric

# six cases, two articles; each article alleged in four cases and violated in two of them
ALLEGED = np.array([[1, 0], [1, 0], [1, 1], [1, 1], [0, 1], [0, 1]], bool)
VIOLATED = np.array([[1, 0], [0, 0], [1, 1], [0, 0], [0, 1], [0, 0]], bool)
# predict a violation for every alleged article, plus article 0 on two cases where it was never alleged
PRED_LOOSE = ALLEGED.copy()
PRED_LOOSE[4, 0] = PRED_LOOSE[5, 0] = True


class TestFixture:
    def test_predict_all_alleged(self):
        micro, macro, per = f1_scores(ALLEGED, VIOLATED)
        assert per == pytest.approx([2 / 3, 2 / 3], abs=1e-12)
        assert micro == pytest.approx(2 / 3, abs=1e-12) and macro == pytest.approx(2 / 3, abs=1e-12)
        assert hard_macro_f1(ALLEGED, VIOLATED, ALLEGED) == pytest.approx(2 / 3, abs=1e-12)

    def test_unalleged_predictions_ignored_by_hard_macro(self):
        micro, macro, per = f1_scores(PRED_LOOSE, VIOLATED)
        # label 0: TP 2, FP 4, FN 0 -> 0.5; label 1 unchanged at 2/3
        assert per == pytest.approx([0.5, 2 / 3], abs=1e-12)
        assert macro == pytest.approx(7 / 12, abs=1e-12)
        # pooled: TP 4, FP 4 + 2, FN 0
        assert micro == pytest.approx(4 / 7, abs=1e-12)
        assert hard_macro_f1(PRED_LOOSE, VIOLATED, ALLEGED) == pytest.approx(2 / 3, abs=1e-12)

    def test_two_label_example(self):
        pred = np.array([[1, 1], [1, 0]], bool)
        gold = np.array([[1, 1], [0, 1]], bool)
        micro, macro, per = f1_scores(pred, gold)
        assert per == pytest.approx([2 / 3, 2 / 3]) and macro == pytest.approx(2 / 3) and micro == pytest.approx(2 / 3)


class TestF1:
    def test_perfect_and_empty(self):
        y = np.array([[1, 0], [0, 1]], bool)
        assert f1_scores(y, y)[:2] == (1.0, 1.0)
        assert f1_scores(np.zeros_like(y), y)[:2] == (0.0, 0.0)

    def test_zero_denominator_label(self):
        _, macro, per = f1_scores(np.zeros((2, 2), bool), np.array([[1, 0], [1, 0]], bool))
        assert per.tolist() == [0.0, 0.0] and macro == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            f1_scores(np.zeros((2, 2)), np.zeros((3, 2)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_micro_label_permutation_invariant(self, seed):
        r = np.random.default_rng(seed)
        p, g = r.random((8, 5)) < 0.4, r.random((8, 5)) < 0.4
        perm = r.permutation(5)
        assert f1_scores(p, g)[0] == pytest.approx(f1_scores(p[:, perm], g[:, perm])[0])
        assert 0.0 <= f1_scores(p, g)[1] <= 1.0


class TestHardMacro:
    def test_never_alleged_article_excluded(self):
        alleged = np.array([[1, 0], [1, 0]], bool)
        value, detail = hard_macro_f1(alleged, np.array([[1, 0], [1, 0]], bool), alleged, return_detail=True)
        assert value == 1.0 and detail["excluded_labels"] == [1]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_unalleged_pairs_never_count(self, seed):
        r = np.random.default_rng(seed)
        alleged = r.random((10, 4)) < 0.5
        violated = alleged & (r.random((10, 4)) < 0.5)
        pred = r.random((10, 4)) < 0.5
        noise = r.random((10, 4)) < 0.5
        flipped = np.where(alleged, pred, noise)  # only unalleged entries change
        assert hard_macro_f1(pred, violated, alleged) == hard_macro_f1(flipped, violated, alleged)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            hard_macro_f1(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)))


class TestLor:
    def test_identical_and_disjoint(self):
        q = np.array([[1, 1, 0]], bool)
        assert lor_at_k(q, np.array([[[1, 1, 0], [1, 1, 0]]], bool)) == 1.0
        assert lor_at_k(q, np.array([[[0, 0, 1], [0, 0, 1]]], bool)) == 0.0

    def test_invalid_slots_ignored(self):
        q = np.array([[1, 0]], bool)
        r = np.array([[[1, 0], [0, 1]]], bool)
        assert lor_at_k(q, r, np.array([[True, False]])) == 1.0

    def test_lor_metric_over_snapshot(self):
        keys = np.array([[0.0], [1.0], [5.0]])
        alleged = np.array([[1, 0], [1, 1], [0, 1]], bool)
        snap = DatastoreSnapshot(keys, alleged, ["a", "b", "c"], 0)
        got = lor_metric(np.array([[1, 0]], bool), np.array([[0.1]]), snap, alleged, k=2)
        assert got == pytest.approx((1.0 + 0.5) / 2)

    def test_empty_store(self):
        snap = DatastoreSnapshot(np.zeros((0, 1)), np.zeros((0, 2), bool), [], 0)
        with pytest.raises(ValueError):
            lor_metric(np.ones((1, 2), bool), np.zeros((1, 1)), snap, np.zeros((0, 2), bool), 1)


class TestReport:
    def test_task_a_needs_alleged(self):
        with pytest.raises(ValueError):
            evaluate(VIOLATED, VIOLATED, "A")

    def test_serialisation(self):
        rep = evaluate(PRED_LOOSE, VIOLATED, "A", ALLEGED, lor=0.4)
        assert isinstance(rep, EvalReport)
        assert rep.hard_macro_f1 == pytest.approx(2 / 3)
        assert '"hard_macro_f1"' in rep.to_json()
        lines = rep.to_csv().strip().splitlines()
        assert len(lines) == 3 and lines[1].startswith("A,")
        assert evaluate(VIOLATED, VIOLATED, "B").hard_macro_f1 is None
