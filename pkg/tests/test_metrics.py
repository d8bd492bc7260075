"""Metric implementations against hand-computed values."""

import pytest

from plmkit.heads import SpanPrediction
from plmkit.metrics import accuracy, exact_match, macro_f1, matthews, span_f1


class TestAccuracy:
    def test_hand_value(self):
        assert accuracy([1, 0, 1], [1, 1, 1]) == pytest.approx(2 / 3)

    def test_perfect_and_zero(self):
        assert accuracy([0, 1], [0, 1]) == 1.0
        assert accuracy([1, 0], [0, 1]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            accuracy([1], [1, 2])

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            accuracy([], [])


class TestMacroF1:
    def test_hand_value(self):
        # class 0: tp=1 fp=1 fn=1 -> f1 0.5; class 1 symmetric -> macro 0.5
        assert macro_f1([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.5)

    def test_unpredicted_class_counts_zero(self):
        # class 0: p=0.5 r=1 -> f1 2/3; class 1 never predicted -> 0
        assert macro_f1([0, 0], [0, 1]) == pytest.approx(1 / 3)

    def test_perfect(self):
        assert macro_f1([0, 1, 2], [0, 1, 2]) == 1.0


class TestMatthews:
    def test_uncorrelated_is_zero(self):
        assert matthews([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.0)

    def test_perfect_and_inverted(self):
        assert matthews([0, 1, 0, 1], [0, 1, 0, 1]) == pytest.approx(1.0)
        assert matthews([1, 0, 1, 0], [0, 1, 0, 1]) == pytest.approx(-1.0)

    def test_hand_value(self):
        # tp=2 tn=1 fp=1 fn=0 -> mcc = (2*1 - 1*0)/sqrt(3*2*2*1) = 2/sqrt(12)
        got = matthews([1, 1, 1, 0], [1, 1, 0, 0])
        assert got == pytest.approx(2 / 12 ** 0.5)


class TestSpanF1:
    def test_hand_value(self):
        pred = [[("a", 0, 1)], [("b", 2, 3)]]
        gold = [[("a", 0, 1)], [("a", 2, 3)]]
        out = span_f1(pred, gold)
        assert out == {"precision": 0.5, "recall": 0.5, "f1": 0.5}

    def test_partial_overlap_is_not_a_match(self):
        out = span_f1([[("a", 0, 2)]], [[("a", 0, 3)]])
        assert out["f1"] == 0.0

    def test_accepts_span_predictions(self):
        pred = [[SpanPrediction(0, 1, 2, score=0.9)]]
        gold = [[(0, 1, 2)]]
        assert span_f1(pred, gold)["f1"] == 1.0

    def test_empty_rows(self):
        # nothing predicted, nothing gold: no tp/fp/fn -> all zeros by convention
        out = span_f1([[]], [[]])
        assert out == {"precision": 0.0, "recall": 0.0, "f1": 0.0}

    def test_precision_recall_asymmetry(self):
        # over-prediction: 1 correct + 1 spurious, 1 gold
        out = span_f1([[("a", 0, 1), ("a", 5, 6)]], [[("a", 0, 1)]])
        assert out["precision"] == 0.5
        assert out["recall"] == 1.0
        assert out["f1"] == pytest.approx(2 / 3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            span_f1([[]], [[], []])


class TestExactMatch:
    def test_whitespace_normalization(self):
        assert exact_match(["a  b "], ["a b"]) == 1.0
        assert exact_match(["a\tb\n"], ["a b"]) == 1.0

    def test_hand_value(self):
        assert exact_match(["x", "y"], ["x", "z"]) == 0.5

    def test_case_matters(self):
        assert exact_match(["A"], ["a"]) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError, match="mismatch"):
            exact_match(["a"], [])
        with pytest.raises(ValueError, match="empty"):
            exact_match([], [])
