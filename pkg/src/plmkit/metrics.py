"""Evaluation metrics for classification, span extraction, and generation."""

from __future__ import annotations

from typing import Sequence

from sklearn.metrics import f1_score, matthews_corrcoef


def accuracy(predictions: Sequence[int], references: Sequence[int]) -> float:
    if len(predictions) != len(references):
        raise ValueError("prediction/reference length mismatch")
    if not references:
        raise ValueError("empty evaluation set")
    return sum(p == r for p, r in zip(predictions, references)) / len(references)


def macro_f1(predictions: Sequence[int], references: Sequence[int]) -> float:
    if len(predictions) != len(references):
        raise ValueError("prediction/reference length mismatch")
    return float(f1_score(references, predictions, average="macro", zero_division=0))


def matthews(predictions: Sequence[int], references: Sequence[int]) -> float:
    if len(predictions) != len(references):
        raise ValueError("prediction/reference length mismatch")
    return float(matthews_corrcoef(references, predictions))


def span_f1(
    predicted: Sequence[Sequence[tuple]], gold: Sequence[Sequence[tuple]]
) -> dict[str, float]:
    """Micro precision/recall/F1 over exact (type, start, end) matches.

    Inputs are per-example collections of span triples (anything
    tuple-comparable works, including SpanPrediction).
    """
    if len(predicted) != len(gold):
        raise ValueError("prediction/reference length mismatch")
    tp = fp = fn = 0
    for pred_row, gold_row in zip(predicted, gold):
        pset = {(s[0], s[1], s[2]) if isinstance(s, tuple) else (s.type_id, s.start, s.end) for s in pred_row}
        gset = {(s[0], s[1], s[2]) if isinstance(s, tuple) else (s.type_id, s.start, s.end) for s in gold_row}
        tp += len(pset & gset)
        fp += len(pset - gset)
        fn += len(gset - pset)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def exact_match(predictions: Sequence[str], references: Sequence[str]) -> float:
    """Fraction of whitespace-normalized exact string matches."""
    if len(predictions) != len(references):
        raise ValueError("prediction/reference length mismatch")
    if not references:
        raise ValueError("empty evaluation set")
    norm = lambda s: " ".join(s.split())
    return sum(norm(p) == norm(r) for p, r in zip(predictions, references)) / len(references)
