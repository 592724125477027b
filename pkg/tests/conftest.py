"""Shared fixtures and independent oracles used across the test suite.

The oracles here are deliberately naive (quadratic pair counting, explicit
step sums) so they share no code path with the implementations under test.
"""

from __future__ import annotations

import numpy as np
import pytest

from gjeval import ClassLabel, Dataset, PredictionRecord


def brute_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Exhaustive Mann-Whitney AUC: every (pos, neg) pair, ties half credit."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def brute_weighted_auc(scores, labels, weights) -> float:
    """Pair-counting AUC with per-sample weights (pair weight = product)."""
    pos = [(s, w) for s, l, w in zip(scores, labels, weights) if l == 1]
    neg = [(s, w) for s, l, w in zip(scores, labels, weights) if l == 0]
    num = 0.0
    den = 0.0
    for sp, wp in pos:
        for sn, wn in neg:
            pw = wp * wn
            den += pw
            if sp > sn:
                num += pw
            elif sp == sn:
                num += 0.5 * pw
    return num / den


def brute_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Non-interpolated AP by walking thresholds high to low, incremental sums."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    n_pos = y.sum()
    ap = 0.0
    prev_recall = 0.0
    i = 0
    tp = fp = 0.0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            tp += y[j]
            fp += 1 - y[j]
            j += 1
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += precision * (recall - prev_recall)
        prev_recall = recall
        i = j
    return ap


def make_records(truths, probs, patient_ids=None) -> Dataset:
    """Dataset from parallel truth/probability rows; one image per row."""
    records = []
    for i, (t, p) in enumerate(zip(truths, probs)):
        pid = patient_ids[i] if patient_ids is not None else f"p{i:04d}"
        records.append(
            PredictionRecord(
                image_id=f"img{i:05d}",
                patient_id=pid,
                truth=ClassLabel(t),
                probs=(float(p[0]), float(p[1]), float(p[2])),
            )
        )
    return Dataset.from_records(records)


@pytest.fixture
def rng():
    return np.random.default_rng(20240)


@pytest.fixture
def small_dataset():
    """Nine images over five patients covering all three classes."""
    truths = [0, 0, 0, 1, 1, 1, 2, 2, 2]
    probs = [
        (0.8, 0.15, 0.05),
        (0.7, 0.2, 0.1),
        (0.3, 0.5, 0.2),   # misclassified A -> E
        (0.1, 0.8, 0.1),
        (0.25, 0.6, 0.15),
        (0.4, 0.35, 0.25),  # misclassified E -> A
        (0.05, 0.1, 0.85),
        (0.2, 0.2, 0.6),
        (0.1, 0.3, 0.6),
    ]
    pids = ["pa", "pa", "pa", "pb", "pb", "pc", "pd", "pd", "pe"]
    return make_records(truths, probs, pids)
