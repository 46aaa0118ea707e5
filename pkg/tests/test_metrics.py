import numpy as np
import pytest

from heanet.exceptions import DataError
from heanet.metrics import ConfusionCounts, accuracy, cat_miou, format_table, ins_miou, instance_iou, to_csv


class TestAccuracy:
    def test_two_of_three(self):
        assert accuracy([1, 2, 0], [1, 2, 3]) == pytest.approx(2 / 3)

    def test_empty(self):
        with pytest.raises(DataError):
            accuracy([], [])

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            accuracy([1, 2], [1])

    def test_non_integer(self):
        with pytest.raises(DataError):
            accuracy([0.5], [0])

    def test_equals_support_weighted_recall(self):
        rng = np.random.default_rng(0)
        truth, pred = rng.integers(0, 5, 200), rng.integers(0, 5, 200)
        counts = ConfusionCounts.from_labels(pred, truth, 5)
        support = counts.tp + counts.fn
        assert accuracy(pred, truth) == pytest.approx(np.sum(counts.recall() * support) / support.sum())
        assert counts.accuracy() == pytest.approx(accuracy(pred, truth))


class TestConfusion:
    def test_support_identity(self):
        rng = np.random.default_rng(1)
        truth, pred = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
        counts = ConfusionCounts.from_labels(pred, truth, 4)
        np.testing.assert_array_equal(counts.tp + counts.fn, np.bincount(truth, minlength=4))
        assert min(counts.tp.min(), counts.fp.min(), counts.fn.min()) >= 0

    def test_merge_equals_recount(self):
        rng = np.random.default_rng(2)
        truth, pred = rng.integers(0, 3, 60), rng.integers(0, 3, 60)
        merged = ConfusionCounts.from_labels(pred[:25], truth[:25], 3) + ConfusionCounts.from_labels(pred[25:], truth[25:], 3)
        whole = ConfusionCounts.from_labels(pred, truth, 3)
        for name in ("tp", "fp", "fn"):
            np.testing.assert_array_equal(getattr(merged, name), getattr(whole, name))

    def test_out_of_range(self):
        with pytest.raises(DataError):
            ConfusionCounts.from_labels([3], [0], 3)


class TestIoU:
    def test_cat_miou_half(self):
        assert cat_miou([0, 0, 0, 0], [0, 0, 1, 1], 2) == pytest.approx(0.25)

    def test_absent_class_counts_as_one(self):
        assert cat_miou([0, 0], [0, 0], 2) == 1.0

    def test_ins_miou_perfect_and_wrong(self):
        truth = [np.array([0, 0, 1, 1]), np.array([0, 0, 1, 1])]
        pred = [np.array([0, 0, 1, 1]), np.array([1, 1, 0, 0])]
        assert ins_miou(pred, truth, 2) == pytest.approx(0.5)

    def test_instance_uses_category_parts(self):
        # part 2 belongs to the category but appears nowhere: counted as 1
        assert instance_iou([0, 1], [0, 1], [0, 1, 2]) == 1.0
        assert instance_iou([0, 0], [0, 1], [0, 1]) == pytest.approx(0.25)

    def test_literal_pooled_ratio(self):
        assert instance_iou([0, 0, 1, 1], [0, 0, 1, 0], 2, literal=True) == pytest.approx(3 / 5)

    def test_ins_miou_empty(self):
        with pytest.raises(DataError):
            ins_miou([], [], 2)

    def test_per_instance_part_lists(self):
        truth = [np.array([0, 1]), np.array([2, 3])]
        assert ins_miou(truth, truth, [[0, 1], [2, 3]]) == 1.0


def test_format_table():
    text = format_table([["rs", 0.5], ["fps", 0.25]], ["method", "acc"])
    lines = text.splitlines()
    assert len(lines) == 4 and "0.5000" in lines[2]


def test_to_csv_round_trips_floats(tmp_path):
    text = to_csv([["a", 0.1]], ["name", "value"], tmp_path / "t.csv")
    assert text == "name,value\na,0.1\n"
    assert (tmp_path / "t.csv").read_text() == text
