"""Confusion-matrix metrics and trimap evaluation."""

import math

import numpy as np
import pytest

from aseg import (
    ConfusionMatrix,
    ShapeError,
    UndefinedMetricError,
    avg_precision,
    fnr,
    fpr,
    giou,
    iou,
    metrics_report,
    miou,
    pixel_accuracy,
    trimap_miou,
)
from aseg.metrics import format_report, per_class_iou, trimap_band


@pytest.fixture
def two_class():
    truth = np.array([[0, 0, 1, 1]])
    pred = np.array([[0, 1, 1, 1]])
    return ConfusionMatrix(2).accumulate(pred, truth)


# ======================================================
# Hand-counted cases
# ======================================================

@pytest.mark.unit
def test_counts_rows_are_truth(two_class):
    assert two_class.counts.tolist() == [[1, 1], [0, 2]]
    assert two_class.total == 4


@pytest.mark.unit
def test_iou_and_means(two_class):
    assert iou(two_class, 0) == pytest.approx(0.5)
    assert iou(two_class, 1) == pytest.approx(2 / 3)
    assert miou(two_class) == pytest.approx(7 / 12)
    assert giou(two_class) == pytest.approx(3 / 5)
    assert pixel_accuracy(two_class) == pytest.approx(0.75)


@pytest.mark.unit
def test_rates(two_class):
    assert avg_precision(two_class) == pytest.approx((1.0 + 2 / 3) / 2)
    assert fpr(two_class) == pytest.approx((0.0 + 0.5) / 2)
    assert fnr(two_class) == pytest.approx((0.5 + 0.0) / 2)


@pytest.mark.unit
def test_ignored_pixels_are_not_counted():
    truth = np.array([[0, 255, 1]])
    pred = np.array([[0, 1, 0]])
    cm = ConfusionMatrix(2).accumulate(pred, truth)
    assert cm.counts.tolist() == [[1, 0], [1, 0]]


@pytest.mark.unit
def test_absent_classes():
    truth = np.array([[0, 0, 1]])
    cm = ConfusionMatrix(3).accumulate(truth.copy(), truth)
    values = per_class_iou(cm)
    assert math.isnan(values[2])
    assert miou(cm) == pytest.approx(1.0)
    assert miou(cm, absent_as_one=True) == pytest.approx(1.0)
    with pytest.raises(UndefinedMetricError):
        iou(cm, 2)


@pytest.mark.unit
def test_absent_as_one_raises_the_mean():
    truth = np.array([[0, 1, 1]])
    pred = np.array([[0, 0, 1]])
    cm = ConfusionMatrix(3).accumulate(pred, truth)
    assert miou(cm) == pytest.approx((0.5 + 0.5) / 2)
    assert miou(cm, absent_as_one=True) == pytest.approx((0.5 + 0.5 + 1.0) / 3)


@pytest.mark.unit
def test_empty_matrix_is_undefined():
    cm = ConfusionMatrix(3)
    for metric in (miou, giou, pixel_accuracy, avg_precision, fpr, fnr):
        with pytest.raises(UndefinedMetricError):
            metric(cm)
    only_void = ConfusionMatrix(2).accumulate(np.zeros((2, 2)), np.full((2, 2), 255))
    with pytest.raises(UndefinedMetricError):
        miou(only_void)


@pytest.mark.unit
def test_bad_inputs():
    with pytest.raises(ShapeError):
        ConfusionMatrix(2).accumulate(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        ConfusionMatrix(2).accumulate(np.zeros((1, 2)), np.array([[0, 2]]))


@pytest.mark.unit
def test_merge_adds_counts(two_class):
    merged = two_class.merge(two_class)
    assert merged.total == 8
    assert two_class.total == 4
    assert miou(merged) == pytest.approx(miou(two_class))


@pytest.mark.unit
def test_matches_brute_force(rng):
    truth = rng.integers(0, 4, (3, 9, 9))
    pred = np.where(rng.random(truth.shape) < 0.7, truth, rng.integers(0, 4, truth.shape))
    cm = ConfusionMatrix(4).accumulate(pred, truth)
    for c in range(4):
        inter = np.sum((pred == c) & (truth == c))
        union = np.sum((pred == c) | (truth == c))
        assert iou(cm, c) == pytest.approx(inter / union)
    assert pixel_accuracy(cm) == pytest.approx(np.mean(pred == truth))


# ======================================================
# Reports
# ======================================================

@pytest.mark.unit
def test_report_csv(tmp_path, two_class):
    report = metrics_report(two_class)
    path = tmp_path / "metrics.csv"
    report.to_csv(str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "metric,class,value"
    assert lines[1].startswith("iou,0,")
    assert any(line.startswith("miou,all,") for line in lines)
    assert "miou" in format_report(report)
    with pytest.raises(FileExistsError):
        report.to_csv(str(path))


# ======================================================
# Trimap
# ======================================================

def _brute_force_band(truth, width, void=255):
    voids = np.argwhere(truth == void)
    band = np.zeros(truth.shape, dtype=bool)
    for y, x in np.ndindex(truth.shape):
        band[y, x] = np.min(np.maximum(np.abs(voids[:, 0] - y), np.abs(voids[:, 1] - x))) <= width
    return band


@pytest.mark.unit
@pytest.mark.parametrize("width", [0, 1, 2, 5])
def test_trimap_band_is_chebyshev_distance(rng, width):
    truth = rng.integers(0, 3, (15, 17))
    truth[rng.random(truth.shape) < 0.03] = 255
    truth[7, 8] = 255
    np.testing.assert_array_equal(trimap_band(truth, width), _brute_force_band(truth, width))


@pytest.mark.unit
def test_trimap_perfect_prediction():
    truth = np.zeros((12, 12), dtype=np.int64)
    truth[:, 6:] = 1
    truth[:, 6] = 255
    pred = np.where(truth == 255, 0, truth)
    results = trimap_miou(pred, truth, [1, 3], num_classes=2)
    assert [b for b, _ in results] == [1, 3]
    assert all(v == pytest.approx(1.0) for _, v in results)


@pytest.mark.unit
def test_trimap_errors_concentrate_near_boundary():
    truth = np.zeros((16, 16), dtype=np.int64)
    truth[:, 8:] = 1
    truth[:, 8] = 255
    pred = np.where(truth == 255, 0, truth)
    pred[:, 9] = 0
    narrow, wide = trimap_miou(pred, truth, [1, 6], num_classes=2)
    assert narrow[1] < wide[1] < 1.0


@pytest.mark.unit
def test_trimap_needs_void_pixels():
    truth = np.zeros((4, 4), dtype=np.int64)
    with pytest.raises(UndefinedMetricError):
        trimap_miou(truth, truth, [1], num_classes=2)
