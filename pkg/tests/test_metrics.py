import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vphype.errors import EmptyEvaluationError, LabelError
from vphype.head import ClassifierHead, cross_entropy, global_pool
from vphype.metrics import ConfusionMatrix, compute_metrics, evaluation_report
from vphype.tensor import Tensor


def brute_force(labels, preds, n):
    total = len(labels)
    correct = sum(1 for a, b in zip(labels, preds) if a == b)
    oa = correct / total
    recalls = []
    for c in range(n):
        idx = [i for i, a in enumerate(labels) if a == c]
        if idx:
            recalls.append(sum(1 for i in idx if preds[i] == c) / len(idx))
    aa = sum(recalls) / len(recalls)
    pe = sum((sum(1 for a in labels if a == c) / total) * (sum(1 for b in preds if b == c) / total) for c in range(n))
    kappa = (oa - pe) / (1 - pe) if pe != 1 else (1.0 if oa == 1 else 0.0)
    return oa, aa, kappa


class TestHandCases:
    def test_diagonal(self):
        m = compute_metrics(ConfusionMatrix(np.diag([5, 3, 7])))
        assert (m.overall_accuracy, m.average_accuracy, m.kappa) == (1.0, 1.0, 1.0)

    def test_two_by_two(self):
        m = compute_metrics(ConfusionMatrix([[40, 10], [20, 30]]))
        assert m.overall_accuracy == pytest.approx(0.70, abs=1e-15)
        assert m.average_accuracy == pytest.approx(0.70, abs=1e-15)
        assert m.kappa == pytest.approx(0.40, abs=1e-15)

    def test_chance_kappa_zero(self):
        m = compute_metrics(ConfusionMatrix([[50, 0], [50, 0]]))
        assert m.kappa == 0.0
        assert m.overall_accuracy == 0.5

    def test_single_class_degenerate(self):
        m = compute_metrics(ConfusionMatrix([[10, 0], [0, 0]]))
        assert m.kappa == 1.0 and m.kappa_degenerate
        assert m.skipped_classes == [1]

    def test_empty(self):
        with pytest.raises(EmptyEvaluationError):
            compute_metrics(ConfusionMatrix.empty(3))


class TestBruteForce:
    @pytest.mark.parametrize("seed", range(100))
    def test_matches(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        size = int(rng.integers(1, 80))
        labels = rng.integers(0, n, size=size)
        preds = np.where(rng.random(size) < 0.6, labels, rng.integers(0, n, size=size))
        m = compute_metrics(ConfusionMatrix.from_predictions(labels, preds, n))
        oa, aa, kappa = brute_force(labels.tolist(), preds.tolist(), n)
        assert m.overall_accuracy == pytest.approx(oa, abs=1e-12)
        assert m.average_accuracy == pytest.approx(aa, abs=1e-12)
        assert m.kappa == pytest.approx(kappa, abs=1e-12)


class TestConfusionMatrix:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60), st.integers(0, 60))
    def test_merge_equals_concatenation(self, pairs, cut):
        labels, preds = map(list, zip(*pairs))
        cut = min(cut, len(pairs))
        a = ConfusionMatrix.from_predictions(labels[:cut], preds[:cut], 4)
        b = ConfusionMatrix.from_predictions(labels[cut:], preds[cut:], 4)
        whole = ConfusionMatrix.from_predictions(labels, preds, 4)
        np.testing.assert_array_equal(a.merge(b).counts, whole.counts)
        np.testing.assert_array_equal(b.merge(a).counts, whole.counts)

    def test_rows_are_truth(self):
        cm = ConfusionMatrix.from_predictions([0, 0, 1], [1, 1, 1], 2)
        np.testing.assert_array_equal(cm.counts, [[0, 2], [0, 1]])

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            ConfusionMatrix.empty(2).update([2], [0])

    def test_report_deterministic(self):
        cm = ConfusionMatrix([[3, 1], [0, 4]], ["a", "b"])
        r1, r2 = evaluation_report(cm), evaluation_report(cm)
        assert r1 == r2
        doc = json.loads(r1)
        assert doc["per_class"]["a"]["recall"] == 0.75
        assert doc["overall"]["OA"] == 7 / 8


class TestHead:
    def test_cross_entropy_uniform(self):
        loss = cross_entropy(Tensor(np.zeros((4, 3))), [0, 1, 2, 0])
        assert loss.item() == pytest.approx(np.log(3), abs=1e-15)

    def test_cross_entropy_bad_label(self):
        with pytest.raises(LabelError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_masked_pool(self):
        feat = np.arange(8.0).reshape(1, 2, 2, 2)
        mask = np.array([[True, False], [False, False]])
        np.testing.assert_array_equal(global_pool(Tensor(feat), mask).data, [[0.0, 4.0]])

    def test_head_shape(self, rng):
        head = ClassifierHead(8, 5, rng)
        assert head(Tensor(rng.normal(size=(3, 8, 2, 2)))).shape == (3, 5)
