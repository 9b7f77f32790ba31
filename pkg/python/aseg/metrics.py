"""
Segmentation metrics from a confusion matrix (rows = truth, columns =
prediction), plus trimap evaluation around void-labelled boundaries.

Usage:
    cm = ConfusionMatrix(6)
    cm.accumulate(pred, truth)
    report = metrics_report(cm)
    print(format_report(report))
"""

import csv
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import ShapeError, UndefinedMetricError

IGNORE_LABEL = 255


class ConfusionMatrix:
    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        self.counts = (np.zeros((num_classes, num_classes), dtype=np.int64)
                       if counts is None else counts.astype(np.int64))

    def accumulate(self, pred: np.ndarray, truth: np.ndarray,
                   ignore: int = IGNORE_LABEL) -> "ConfusionMatrix":
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
        valid = truth != ignore
        t = truth[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        c = self.num_classes
        for name, arr in (("truth", t), ("prediction", p)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise ShapeError(f"{name} labels must lie in 0..{c - 1} (or {ignore} for truth)")
        self.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError(f"cannot merge {self.num_classes}- and {other.num_classes}-class matrices")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _require(self) -> None:
        if self.total == 0:
            raise UndefinedMetricError("metric undefined on an empty confusion matrix")

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts)

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp


def iou(cm: ConfusionMatrix, cls: int) -> float:
    cm._require()
    denom = cm.tp[cls] + cm.fp[cls] + cm.fn[cls]
    if denom == 0:
        raise UndefinedMetricError(f"class {cls} absent from prediction and truth")
    return float(cm.tp[cls] / denom)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN for classes absent from both prediction and truth."""
    cm._require()
    denom = cm.tp + cm.fp + cm.fn
    out = np.full(cm.num_classes, np.nan)
    present = denom > 0
    out[present] = cm.tp[present] / denom[present]
    return out


def miou(cm: ConfusionMatrix, absent_as_one: bool = False) -> float:
    values = per_class_iou(cm)
    if absent_as_one:
        values = np.where(np.isnan(values), 1.0, values)
    return float(np.nanmean(values))


def giou(cm: ConfusionMatrix) -> float:
    cm._require()
    return float(cm.tp.sum() / (cm.tp + cm.fp + cm.fn).sum())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    cm._require()
    return float(cm.tp.sum() / cm.total)


def _class_mean(num: np.ndarray, den: np.ndarray) -> float:
    ok = den > 0
    if not ok.any():
        raise UndefinedMetricError("no class has a defined rate")
    return float(np.mean(num[ok] / den[ok]))


def avg_precision(cm: ConfusionMatrix) -> float:
    """Mean per-class precision TP / (TP + FP) over predicted classes."""
    cm._require()
    return _class_mean(cm.tp, cm.tp + cm.fp)


def fpr(cm: ConfusionMatrix) -> float:
    """Class-averaged FP / (FP + TN)."""
    cm._require()
    tn = cm.total - cm.tp - cm.fp - cm.fn
    return _class_mean(cm.fp, cm.fp + tn)


def fnr(cm: ConfusionMatrix) -> float:
    """Class-averaged FN / (FN + TP)."""
    cm._require()
    return _class_mean(cm.fn, cm.fn + cm.tp)


@dataclass
class MetricsReport:
    per_class_iou: List[float]
    miou: float
    giou: float
    accuracy: float
    avg_precision: float
    fpr: float
    fnr: float

    def rows(self) -> List[Tuple[str, str, float]]:
        rows = [("iou", str(c), v) for c, v in enumerate(self.per_class_iou)]
        rows += [(name, "all", getattr(self, name))
                 for name in ("miou", "giou", "accuracy", "avg_precision", "fpr", "fnr")]
        return rows

    def to_csv(self, path: str) -> None:
        with open(path, "x", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "class", "value"])
            for metric, cls, value in self.rows():
                writer.writerow([metric, cls, repr(float(value))])


def metrics_report(cm: ConfusionMatrix) -> MetricsReport:
    return MetricsReport(
        per_class_iou=[float(v) for v in per_class_iou(cm)],
        miou=miou(cm),
        giou=giou(cm),
        accuracy=pixel_accuracy(cm),
        avg_precision=avg_precision(cm),
        fpr=fpr(cm),
        fnr=fnr(cm),
    )


def format_report(report: MetricsReport) -> str:
    lines = [f"{'metric':<14}{'class':>6}{'value':>10}"]
    for metric, cls, value in report.rows():
        shown = "n/a" if np.isnan(value) else f"{value:.4f}"
        lines.append(f"{metric:<14}{cls:>6}{shown:>10}")
    return "\n".join(lines)


# ======================================================
# Trimap
# ======================================================

def trimap_band(truth: np.ndarray, width: int, void: int = IGNORE_LABEL) -> np.ndarray:
    """Pixels within ``width`` (8-connected steps) of a void pixel."""
    seeds = truth == void
    if not seeds.any():
        raise UndefinedMetricError("trimap needs void-labelled pixels in the truth mask")
    if width <= 0:
        return seeds
    return ndimage.binary_dilation(seeds, structure=np.ones((3, 3), dtype=bool), iterations=width)


def trimap_miou(pred: np.ndarray, truth: np.ndarray, band_widths: Sequence[int],
                num_classes: int, void: int = IGNORE_LABEL) -> List[Tuple[int, float]]:
    """mIoU restricted to each trimap band (void pixels themselves are not scored)."""
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    results = []
    for b in band_widths:
        band = trimap_band(truth, b, void)
        masked = np.where(band, truth, void)
        cm = ConfusionMatrix(num_classes).accumulate(pred, masked, ignore=void)
        if cm.total == 0:
            raise UndefinedMetricError(f"trimap band {b} contains no labelled pixels")
        results.append((b, miou(cm)))
    return results
