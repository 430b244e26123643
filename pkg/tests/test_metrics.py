"""
Tests for confusion matrices, IoU and the report record.
"""

import json

import numpy as np
import pytest

from src.bench import LatencyStats
from src.errors import LabelRangeError, NoScoredClassesError, ShapeError
from src.metrics import MetricsReport, confusion, miou, pixel_accuracy


def naive_iou(pred, gt, k, ignore=255):
    """Per-class IoU from a double loop over classes and pixels."""
    out = []
    for c in range(k):
        tp = fp = fn = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            if g == ignore:
                continue
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
        out.append(tp / (tp + fp + fn) if tp + fp + fn else None)
    return out


class TestConfusion:
    def test_rows_are_ground_truth(self):
        cm = confusion(np.array([0, 1, 1]), np.array([0, 0, 1]), 2)
        np.testing.assert_array_equal(cm, [[1, 1], [0, 1]])

    def test_ignored_pixels_skipped(self):
        cm = confusion(np.array([0, 1, 2]), np.array([0, 255, 255]), 3)
        assert cm.sum() == 1

    def test_ignored_gt_may_hold_any_prediction(self):
        confusion(np.array([9]), np.array([255]), 3)

    def test_out_of_range(self):
        with pytest.raises(LabelRangeError, match="ground-truth id 4"):
            confusion(np.array([0]), np.array([4]), 3)
        with pytest.raises(LabelRangeError, match="predicted"):
            confusion(np.array([3]), np.array([0]), 3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            confusion(np.zeros((2, 2)), np.zeros((2, 3)), 2)


class TestMiou:
    def test_two_class_example(self):
        per_class, mean = miou(np.array([[3, 1], [1, 3]]))
        assert per_class == [0.6, 0.6]
        assert mean == pytest.approx(0.6)

    def test_absent_class_is_undefined(self):
        per_class, mean = miou(np.array([[4, 0, 0], [0, 2, 0], [0, 0, 0]]))
        assert per_class == [1.0, 1.0, None]
        assert mean == 1.0

    def test_no_scored_classes(self):
        with pytest.raises(NoScoredClassesError):
            miou(np.zeros((3, 3), dtype=np.int64))

    def test_matches_double_loop(self, rng):
        for _ in range(10):
            gt = rng.integers(0, 5, (12, 12))
            gt[rng.random((12, 12)) < 0.1] = 255
            pred = np.where(rng.random((12, 12)) < 0.6, gt % 255, rng.integers(0, 5, (12, 12)))
            per_class, mean = miou(confusion(pred, gt, 5))
            expected = naive_iou(pred, gt, 5)
            for got, want in zip(per_class, expected):
                assert (got is None) == (want is None)
                if want is not None:
                    assert got == pytest.approx(want, abs=1e-12)
            assert mean == pytest.approx(np.mean([v for v in expected if v is not None]), abs=1e-12)

    def test_class_permutation_invariant(self, rng):
        gt = rng.integers(0, 4, (16, 16))
        pred = rng.integers(0, 4, (16, 16))
        perm = np.array([2, 0, 3, 1])
        _, a = miou(confusion(pred, gt, 4))
        _, b = miou(confusion(perm[pred], perm[gt], 4))
        assert a == pytest.approx(b, abs=1e-12)

    def test_perfect_prediction(self, rng):
        gt = rng.integers(0, 3, (8, 8))
        assert miou(confusion(gt, gt, 3))[1] == 1.0
        assert pixel_accuracy(confusion(gt, gt, 3)) == 1.0

    def test_pixel_accuracy_empty(self):
        assert pixel_accuracy(np.zeros((2, 2), dtype=np.int64)) == 0.0


class TestMetricsReport:
    def test_from_confusion(self):
        report = MetricsReport.from_confusion(np.array([[3, 1], [1, 3]]), macs=10, flops=20)
        assert report.miou == pytest.approx(0.6)
        assert report.pixel_accuracy == 0.75
        assert report.flops == 20
        assert report.cm == [[3, 1], [1, 3]]

    def test_confusion_survives_json(self):
        cm = confusion(np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2]), 3)
        record = json.loads(json.dumps(MetricsReport.from_confusion(cm).to_dict()))
        assert record["cm"] == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]

    def test_to_dict_with_latency(self):
        latency = LatencyStats(samples_ms=[1.0, 2.0, 3.0])
        record = MetricsReport(latency=latency).to_dict()
        assert record["latency"]["mean_ms"] == pytest.approx(2.0)
        assert MetricsReport().to_dict()["latency"] is None
