"""Confusion-matrix accumulation and segmentation metrics.

Matrix orientation: rows are predicted class, columns are true class, so
column-normalized diagonal entries give per-class recall.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np


class ConfusionMatrix:
    def __init__(self, class_names):
        self.class_names = tuple(class_names)
        n = len(self.class_names)
        self.counts = np.zeros((n, n), dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, predicted, truth) -> "ConfusionMatrix":
        """Count (predicted, true) pairs into the matrix, in place."""
        predicted = np.asarray(predicted, dtype=np.int64)
        truth = np.asarray(truth, dtype=np.int64)
        if predicted.shape != truth.shape:
            raise ValueError(
                f"length mismatch: predicted {predicted.shape} vs truth {truth.shape}"
            )
        if predicted.size == 0:
            return self
        n = self.n_classes
        for arr, name in ((predicted, "predicted"), (truth, "truth")):
            if arr.min() < 0 or arr.max() >= n:
                raise ValueError(f"{name} contains class index out of range [0,{n})")
        self.counts += np.bincount(
            predicted * n + truth, minlength=n * n
        ).reshape(n, n)
        return self

    def merged(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.class_names)
        out.counts = self.counts + other.counts
        return out


@dataclass
class MetricsReport:
    class_names: tuple[str, ...]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    iou: np.ndarray
    present: np.ndarray  # classes with nonzero row-sum + column-sum
    oa: float
    miou: float
    avg_f1: float


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def derive_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """OA, mIoU, per-class precision/recall/F1/IoU, and average F1.

    0/0 ratios are defined as 0; classes absent from both predictions and
    truth are excluded from the mIoU and average-F1 means.
    """
    if cm.total == 0:
        raise ValueError("cannot derive metrics from an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    row = c.sum(axis=1)  # per predicted class
    col = c.sum(axis=0)  # per true class
    precision = _safe_div(tp, row)
    recall = _safe_div(tp, col)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    iou = _safe_div(tp, row + col - tp)
    present = (row + col) > 0
    oa = float(tp.sum() / c.sum())
    miou = float(iou[present].mean())
    avg_f1 = float(f1[present].mean())
    return MetricsReport(
        cm.class_names, precision, recall, f1, iou, present, oa, miou, avg_f1
    )


def f1_from_precision_recall(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def format_report(report: MetricsReport) -> str:
    """Aligned text table: per-class precision/recall/F1 plus summary footer."""
    width = max(len(n) for n in report.class_names + ("Precision",)) + 2
    cols = "".join(f"{n:>{width}}" for n in report.class_names)
    lines = [f"{'':<{width}}{cols}"]
    for name, values in (
        ("Precision", report.precision),
        ("Recall", report.recall),
        ("F1", report.f1),
        ("IoU", report.iou),
    ):
        row = "".join(f"{100 * v:>{width}.1f}" for v in values)
        lines.append(f"{name:<{width}}{row}")
    lines.append(
        f"OA {100 * report.oa:.2f}  mIoU {100 * report.miou:.2f}  "
        f"avgF1 {100 * report.avg_f1:.2f}"
    )
    return "\n".join(lines)


def report_csv(report: MetricsReport) -> str:
    lines = ["class,precision,recall,f1,iou"]
    for i, name in enumerate(report.class_names):
        lines.append(
            f"{name},{report.precision[i]:.6f},{report.recall[i]:.6f},"
            f"{report.f1[i]:.6f},{report.iou[i]:.6f}"
        )
    lines.append(f"__overall__,{report.oa:.6f},{report.miou:.6f},{report.avg_f1:.6f},")
    return "\n".join(lines) + "\n"


def measure_latency(forward, block, repetitions: int = 10) -> float:
    """Median wall-clock milliseconds per single-block forward (one warmup)."""
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    forward(block)
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        forward(block)
        samples.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(samples))
