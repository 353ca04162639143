"""Confusion matrix and IoU metric tests, including a brute-force oracle."""

import numpy as np
import pytest

from dgle.core import IGNORE, LabelMap
from dgle.evalkit import (
    ConfusionMatrix,
    accumulate,
    iou,
    miou,
    pixel_accuracy,
    seed_quality,
    write_report,
)


def brute_force_iou(gts, preds, k):
    """Per-class IoU via explicit pixel sets; IGNORE ground truth excluded."""
    out = []
    for c in range(k):
        inter = union = 0
        for gt, pred in zip(gts, preds):
            valid = gt.data != IGNORE
            g = valid & (gt.data == c)
            p = valid & (pred.data == c)
            inter += int((g & p).sum())
            union += int((g | p).sum())
        out.append(inter / union if union else None)
    return out


def random_pair(rng, k, h=8, w=8):
    gt = rng.integers(0, k, size=(h, w)).astype(np.uint8)
    gt[rng.random((h, w)) < 0.2] = IGNORE
    pred = rng.integers(0, k + 1, size=(h, w)).astype(np.uint8)
    pred[pred == k] = IGNORE
    return LabelMap(gt, k), LabelMap(pred, k)


class TestOracle:
    def test_matches_brute_force_on_random_maps(self):
        rng = np.random.default_rng([21, 0])
        for trial in range(50):
            k = int(rng.integers(2, 6))
            pairs = [random_pair(rng, k) for _ in range(int(rng.integers(1, 5)))]
            cm = ConfusionMatrix(k)
            for gt, pred in pairs:
                cm = accumulate(cm, gt, pred)
            expected = brute_force_iou([g for g, _ in pairs], [p for _, p in pairs], k)
            for c in range(k):
                got = iou(cm, c)
                if expected[c] is None:
                    assert got is None
                else:
                    assert got == pytest.approx(expected[c], abs=0)
            defined = [e for e in expected if e is not None]
            if defined:
                assert miou(cm) == pytest.approx(float(np.mean(defined)), abs=0)

    def test_hand_computed_two_by_two(self):
        gt = LabelMap(np.array([[0, 0], [1, 1]], dtype=np.uint8), 3)
        pred = LabelMap(np.array([[0, 1], [1, 1]], dtype=np.uint8), 3)
        cm = accumulate(ConfusionMatrix(3), gt, pred)
        assert iou(cm, 0) == pytest.approx(1 / 2, abs=0)
        assert iou(cm, 1) == pytest.approx(2 / 3, abs=0)
        assert iou(cm, 2) is None
        assert miou(cm) == pytest.approx(7 / 12, abs=1e-15)


class TestAccumulate:
    def test_order_independent(self):
        rng = np.random.default_rng([21, 1])
        pairs = [random_pair(rng, 4) for _ in range(6)]
        cm1 = ConfusionMatrix(4)
        for gt, pred in pairs:
            cm1 = accumulate(cm1, gt, pred)
        cm2 = ConfusionMatrix(4)
        for gt, pred in reversed(pairs):
            cm2 = accumulate(cm2, gt, pred)
        np.testing.assert_array_equal(cm1.counts, cm2.counts)

    def test_ignore_gt_rows_dropped(self):
        gt = LabelMap(np.full((8, 8), IGNORE, dtype=np.uint8), 3)
        pred = LabelMap(np.zeros((8, 8), dtype=np.uint8), 3)
        cm = accumulate(ConfusionMatrix(3), gt, pred)
        assert cm.total == 0

    def test_pred_ignore_lands_in_reserved_column(self):
        gt = LabelMap(np.zeros((8, 8), dtype=np.uint8), 3)
        pred = LabelMap(np.full((8, 8), IGNORE, dtype=np.uint8), 3)
        cm = accumulate(ConfusionMatrix(3), gt, pred)
        assert cm.unlabeled_pred_count() == 64
        assert iou(cm, 0) == 0.0

    def test_shape_mismatch_rejected(self):
        gt = LabelMap(np.zeros((8, 8), dtype=np.uint8), 3)
        pred = LabelMap(np.zeros((8, 10), dtype=np.uint8), 3)
        with pytest.raises(ValueError):
            accumulate(ConfusionMatrix(3), gt, pred)

    def test_merge_is_elementwise_sum(self):
        rng = np.random.default_rng([21, 2])
        a_pairs = [random_pair(rng, 3) for _ in range(3)]
        b_pairs = [random_pair(rng, 3) for _ in range(3)]
        cm_a = ConfusionMatrix(3)
        for gt, pred in a_pairs:
            cm_a = accumulate(cm_a, gt, pred)
        cm_b = ConfusionMatrix(3)
        for gt, pred in b_pairs:
            cm_b = accumulate(cm_b, gt, pred)
        merged = cm_a.merge(cm_b)
        cm_all = ConfusionMatrix(3)
        for gt, pred in a_pairs + b_pairs:
            cm_all = accumulate(cm_all, gt, pred)
        np.testing.assert_array_equal(merged.counts, cm_all.counts)


class TestEdgeCases:
    def test_miou_all_undefined_raises(self):
        with pytest.raises(ValueError):
            miou(ConfusionMatrix(3))

    def test_iou_bounds(self):
        rng = np.random.default_rng([21, 3])
        for _ in range(20):
            gt, pred = random_pair(rng, 4)
            cm = accumulate(ConfusionMatrix(4), gt, pred)
            for c in range(4):
                v = iou(cm, c)
                if v is not None:
                    assert 0.0 <= v <= 1.0

    def test_pixel_accuracy_perfect(self):
        gt = LabelMap(np.arange(64, dtype=np.uint8).reshape(8, 8) % 4, 4)
        cm = accumulate(ConfusionMatrix(4), gt, gt)
        assert pixel_accuracy(cm) == 1.0


class TestSeedQuality:
    def test_perfect_seed(self):
        gt = LabelMap((np.arange(64, dtype=np.uint8) % 3).reshape(8, 8), 3)
        assert seed_quality(gt, gt) == (1.0, 1.0)

    def test_all_ignore_seed(self):
        gt = LabelMap(np.zeros((8, 8), dtype=np.uint8), 3)
        seed = LabelMap(np.full((8, 8), IGNORE, dtype=np.uint8), 3)
        precision, coverage = seed_quality(gt, seed)
        assert precision is None
        assert coverage == 0.0

    def test_half_covered_half_correct(self):
        gt = LabelMap(np.zeros((2, 2), dtype=np.uint8), 3)
        seed = LabelMap(np.array([[0, 1], [IGNORE, IGNORE]], dtype=np.uint8), 3)
        assert seed_quality(gt, seed) == (0.5, 0.5)


class TestReport:
    def test_csv_has_class_rows_and_miou(self, tmp_path):
        gt = LabelMap(np.array([[0, 0], [1, 1]], dtype=np.uint8), 3)
        pred = LabelMap(np.array([[0, 1], [1, 1]], dtype=np.uint8), 3)
        cm = accumulate(ConfusionMatrix(3), gt, pred)
        path = tmp_path / "report.csv"
        write_report(str(path), cm, class_names=["bg", "a", "b"])
        text = path.read_text()
        assert "bg" in text and "mIoU" in text
        assert f"{7 / 12:.6f}"[:6] in text
