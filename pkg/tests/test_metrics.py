import math
import os
import sys

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import f1_score, roc_auc_score

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src_python')))

from errors import EmptyInput, SingleClass
from metrics import EvalResult, accuracy_f1, aggregate_folds, auc, bce, evaluate


def _result(accuracy=0.8, auc_value=0.9, f1=0.85, loss=0.4, n=10):
    return EvalResult(n, accuracy, f1, auc_value, loss, 0, 0, 0, 0)


class TestAccuracyF1:
    def test_perfect(self):
        accuracy, f1, _ = accuracy_f1([0.9, 0.1, 0.7], [1, 0, 1])
        assert accuracy == 1.0
        assert f1 == 1.0

    def test_hand_counted_confusion(self):
        accuracy, f1, c = accuracy_f1([0.9, 0.4, 0.6], [1, 0, 0])
        assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 1, 0)
        assert accuracy == pytest.approx(2 / 3)
        assert f1 == pytest.approx(2 / 3)

    def test_all_negative(self):
        accuracy, f1, _ = accuracy_f1([0.1, 0.2], [0, 0])
        assert accuracy == 1.0
        assert f1 == 0.0

    def test_threshold_is_inclusive(self):
        _, _, c = accuracy_f1([0.5], [1])
        assert c.tp == 1

    def test_empty(self):
        with pytest.raises(EmptyInput):
            accuracy_f1([], [])

    def test_matches_sklearn_f1(self):
        rng = np.random.default_rng(0)
        probs = rng.random(200)
        labels = rng.integers(0, 2, 200)
        _, f1, _ = accuracy_f1(probs, labels)
        assert f1 == pytest.approx(f1_score(labels, probs >= 0.5))


class TestAuc:
    def test_separated(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties(self):
        assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_hand_counted_pairs(self):
        assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_single_class(self):
        with pytest.raises(SingleClass):
            auc([0.2, 0.3], [1, 1])

    def test_matches_sklearn(self):
        rng = np.random.default_rng(1)
        probs = np.round(rng.random(300), 2)  # rounding forces ties
        labels = rng.integers(0, 2, 300)
        assert auc(probs, labels) == pytest.approx(roc_auc_score(labels, probs), abs=1e-12)

    def test_matches_sklearn_on_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(2, 60))
            labels = rng.integers(0, 2, n)
            labels[:2] = (0, 1)
            probs = rng.integers(0, int(rng.integers(2, 12)), n) / 10.0  # small alphabet, many ties
            assert auc(probs, labels) == pytest.approx(roc_auc_score(labels, probs), abs=1e-12)


class TestEvaluate:
    def test_bundles_all_metrics(self):
        result = evaluate([0.9, 0.4, 0.6], [1, 0, 0])
        assert result.n == 3
        assert result.auc == pytest.approx(1.0)
        assert result.loss == pytest.approx(bce([0.9, 0.4, 0.6], [1, 0, 0]))

    def test_single_class_auc_is_nan(self):
        assert math.isnan(evaluate([0.9, 0.8], [1, 1]).auc)

    def test_bce_value(self):
        assert bce([0.95], [1], epsilon=0.1) == pytest.approx(0.19851, abs=1e-5)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate([0.1, 0.2], [1])


class TestAggregation:
    def test_mean_and_population_std_in_percent(self):
        report = aggregate_folds([_result(accuracy=0.8), _result(accuracy=0.9)])
        assert report.mean["accuracy"] == pytest.approx(85.0)
        assert report.std["accuracy"] == pytest.approx(5.0)
        assert report.mean["loss"] == pytest.approx(0.4)

    def test_identical_folds(self):
        report = aggregate_folds([_result()] * 4)
        assert all(v == pytest.approx(0.0) for v in report.std.values())

    def test_single_fold(self):
        report = aggregate_folds([_result(f1=0.7)])
        assert report.mean["f1"] == pytest.approx(70.0)
        assert report.std["f1"] == 0.0

    def test_empty(self):
        with pytest.raises(EmptyInput):
            aggregate_folds([])

    def test_single_class_fold_skipped_for_auc(self):
        report = aggregate_folds([_result(auc_value=float("nan")), _result(auc_value=0.8)])
        assert report.mean["auc"] == pytest.approx(80.0)
        assert report.std["auc"] == 0.0

    def test_csv_layout(self, tmp_path):
        report = aggregate_folds([_result(accuracy=0.8), _result(accuracy=0.9)], "SubjectKFold", 3, "hash")
        path = report.to_csv(tmp_path / "out" / "crossval.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["fold", "n", "accuracy", "auc", "f1", "loss"]
        assert list(frame["fold"].astype(str)) == ["0", "1", "mean", "std"]
        assert frame["accuracy"].tolist() == pytest.approx([80.0, 90.0, 85.0, 5.0])

    def test_dict(self):
        data = aggregate_folds([_result()], "SubjectKFold", 1, "h").to_dict()
        assert data["strategy"] == "SubjectKFold"
        assert len(data["folds"]) == 1
        assert set(data["mean"]) == {"accuracy", "auc", "f1", "loss"}
