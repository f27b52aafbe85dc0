"""Threshold-free and confusion-matrix metrics."""

from __future__ import annotations

import math

import numpy as np


class UndefinedMetric(ValueError):
    """The metric is undefined for this input (e.g. AUC with one class)."""


def roc_auc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos · n_neg), tied scores get half credit."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC-AUC needs both classes")
    _, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    # midrank of each distinct score (1-based); exact in binary for integer and half-integer values
    upper = np.cumsum(counts)
    mid = upper - (counts - 1) / 2.0
    rank_sum = mid[inv][y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def confusion(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tn, fp, fn, tp) with a positive prediction when score >= threshold."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    return tn, fp, fn, tp


def precision(tp, fp) -> float:
    return tp / (tp + fp) if tp + fp > 0 else 0.0


def recall(tp, fn) -> float:
    return tp / (tp + fn) if tp + fn > 0 else 0.0


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def mcc(tn, fp, fn, tp) -> float:
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return float((tp * tn - fp * fn) / math.sqrt(den))


def accuracy(tn, fp, fn, tp) -> float:
    n = tn + fp + fn + tp
    return (tn + tp) / n if n else 0.0


def summarize(tn, fp, fn, tp) -> dict:
    """All count-based metrics; counts may be integers or percentages."""
    p, r = precision(tp, fp), recall(tp, fn)
    return {"precision": p, "recall": r, "f1": f1_score(p, r), "mcc": mcc(tn, fp, fn, tp),
            "accuracy": accuracy(tn, fp, fn, tp)}
