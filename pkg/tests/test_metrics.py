import math

import numpy as np
import pytest

from supertokenseg.metrics import (
    ConfusionMatrix,
    derive_metrics,
    f1_from_precision_recall,
    format_report,
    measure_latency,
    report_csv,
)

NAMES6 = ("n0", "n1", "n2", "n3", "n4", "n5")


def matrix_from(counts, names=None):
    counts = np.asarray(counts, dtype=np.int64)
    cm = ConfusionMatrix(names or NAMES6[: counts.shape[0]])
    cm.counts = counts
    return cm


class TestF1FromPrecisionRecall:
    # published per-class results quoted as (precision%, recall%) -> F1%
    @pytest.mark.parametrize(
        "p,r,f1",
        [(87.8, 89.0, 88.4), (92.0, 95.6, 93.8), (96.2, 83.8, 89.6)],
    )
    def test_reproduces_reported_f1(self, p, r, f1):
        got = f1_from_precision_recall(p / 100, r / 100) * 100
        assert abs(got - f1) <= 0.05

    def test_zero_denominator(self):
        assert f1_from_precision_recall(0.0, 0.0) == 0.0

    def test_equal_inputs_fixed_point(self):
        assert math.isclose(f1_from_precision_recall(0.7, 0.7), 0.7, rel_tol=1e-12)


class TestConfusionMatrix:
    def test_accumulate_matches_pair_recount(self, rng):
        pred = rng.integers(0, 6, 500)
        truth = rng.integers(0, 6, 500)
        cm = ConfusionMatrix(NAMES6)
        cm.accumulate(pred, truth)
        # independent recount via explicit pair loop
        expect = np.zeros((6, 6), dtype=np.int64)
        for p, t in zip(pred, truth):
            expect[p, t] += 1
        np.testing.assert_array_equal(cm.counts, expect)
        assert cm.total == 500

    def test_accumulate_is_associative(self, rng):
        chunks = [
            (rng.integers(0, 6, 50), rng.integers(0, 6, 50)) for _ in range(4)
        ]
        one = ConfusionMatrix(NAMES6)
        for p, t in chunks:
            one.accumulate(p, t)
        merged = ConfusionMatrix(NAMES6)
        for p, t in chunks:
            part = ConfusionMatrix(NAMES6)
            part.accumulate(p, t)
            merged = merged.merged(part)
        np.testing.assert_array_equal(one.counts, merged.counts)

    def test_rejects_out_of_range(self):
        cm = ConfusionMatrix(NAMES6)
        with pytest.raises(ValueError):
            cm.accumulate([6], [0])
        with pytest.raises(ValueError):
            cm.accumulate([0], [-1])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(NAMES6).accumulate([0, 1], [0])


class TestDeriveMetrics:
    def test_perfect_predictions(self):
        report = derive_metrics(matrix_from(np.eye(6, dtype=np.int64) * 10))
        np.testing.assert_array_equal(report.precision, np.ones(6))
        np.testing.assert_array_equal(report.recall, np.ones(6))
        np.testing.assert_array_equal(report.f1, np.ones(6))
        np.testing.assert_array_equal(report.iou, np.ones(6))
        assert report.oa == report.miou == report.avg_f1 == 1.0

    def test_matches_definitional_oracle(self, rng):
        counts = rng.integers(0, 40, (6, 6))
        report = derive_metrics(matrix_from(counts))
        c = counts.astype(float)
        for i in range(6):
            tp = c[i, i]
            fp = c[i, :].sum() - tp
            fn = c[:, i].sum() - tp
            prec = tp / (tp + fp) if tp + fp > 0 else 0.0
            rec = tp / (tp + fn) if tp + fn > 0 else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
            iou = tp / (tp + fp + fn) if tp + fp + fn > 0 else 0.0
            assert math.isclose(report.precision[i], prec, abs_tol=1e-12)
            assert math.isclose(report.recall[i], rec, abs_tol=1e-12)
            assert math.isclose(report.f1[i], f1, abs_tol=1e-12)
            assert math.isclose(report.iou[i], iou, abs_tol=1e-12)
        assert math.isclose(report.oa, np.trace(c) / c.sum(), abs_tol=1e-12)

    def test_absent_class_excluded_from_means(self):
        counts = np.zeros((3, 3), dtype=np.int64)
        counts[0, 0] = 5
        counts[1, 0] = 1
        report = derive_metrics(matrix_from(counts, names=("a", "b", "c")))
        np.testing.assert_array_equal(report.present, [True, True, False])
        assert math.isclose(report.miou, (report.iou[0] + report.iou[1]) / 2)

    def test_class_permutation_invariance(self, rng):
        counts = rng.integers(0, 30, (6, 6))
        perm = rng.permutation(6)
        a = derive_metrics(matrix_from(counts))
        b = derive_metrics(matrix_from(counts[np.ix_(perm, perm)]))
        np.testing.assert_allclose(b.iou, a.iou[perm], atol=1e-12)
        assert math.isclose(a.oa, b.oa, abs_tol=1e-12)
        assert math.isclose(a.miou, b.miou, abs_tol=1e-12)
        assert math.isclose(a.avg_f1, b.avg_f1, abs_tol=1e-12)

    def test_two_class_iou_f1_identity(self, rng):
        counts = rng.integers(1, 20, (2, 2))
        report = derive_metrics(matrix_from(counts, names=("a", "b")))
        for i in range(2):
            f1 = report.f1[i]
            assert math.isclose(report.iou[i], f1 / (2 - f1), rel_tol=1e-12)

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            derive_metrics(ConfusionMatrix(NAMES6))


class TestReportFormatting:
    def test_text_table_contains_summary(self):
        report = derive_metrics(matrix_from(np.eye(6, dtype=np.int64)))
        text = format_report(report)
        assert "OA 100.00" in text and "mIoU 100.00" in text
        assert all(n in text for n in NAMES6)

    def test_csv_has_row_per_class(self):
        report = derive_metrics(matrix_from(np.eye(6, dtype=np.int64)))
        lines = report_csv(report).strip().split("\n")
        assert lines[0] == "class,precision,recall,f1,iou"
        assert len(lines) == 8  # header + 6 classes + overall
        assert lines[-1].startswith("__overall__,")


class TestMeasureLatency:
    def test_counts_calls_and_returns_positive(self):
        calls = []
        ms = measure_latency(lambda b: calls.append(b), "blk", repetitions=5)
        assert len(calls) == 6  # warmup + 5 timed
        assert ms >= 0.0

    def test_rejects_zero_repetitions(self):
        with pytest.raises(ValueError):
            measure_latency(lambda b: None, None, repetitions=0)
