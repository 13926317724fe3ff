"""Classification metrics over 4 classes, plus equal-weight ensembling.

Conventions, all documented and tested: predictions are per-row argmax with
ties going to the lowest class index; any F1 with an empty denominator is 0;
weighted F1 weights per-class F1 by truth support; macro F1 averages over
all 4 classes whether or not they occur. Report serialization rounds scores
to 6 decimal places.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ShapeError

NUM_CLASSES = 4


@dataclass
class EvalReport:
    confusion: np.ndarray          # (4, 4) int counts, rows = truth, cols = prediction
    accuracy: float
    per_class_f1: List[float]
    weighted_f1: float
    macro_f1: float
    support: List[int]


def _as_prob_array(probs) -> np.ndarray:
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != NUM_CLASSES:
        raise ShapeError(f"expected (N, {NUM_CLASSES}) probabilities, got {arr.shape}")
    return arr


def evaluate(probs, truths: Sequence[int]) -> EvalReport:
    """Confusion matrix, accuracy, per-class/weighted/macro F1 from probabilities."""
    arr = _as_prob_array(probs)
    truth = np.asarray(truths, dtype=np.intp)
    if truth.ndim != 1 or truth.shape[0] != arr.shape[0]:
        raise ShapeError(f"{arr.shape[0]} probability rows vs {truth.shape} truths")
    if arr.shape[0] < 1:
        raise ConfigError("evaluate needs at least one sample")
    if np.any((truth < 0) | (truth >= NUM_CLASSES)):
        raise ConfigError(f"truth labels must be in [0, {NUM_CLASSES}), got {sorted(set(truth.tolist()))}")

    preds = np.argmax(arr, axis=1)  # first maximum, i.e. lowest index on ties
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)

    n = arr.shape[0]
    accuracy = float(np.trace(confusion)) / n
    support = confusion.sum(axis=1)
    f1 = []
    for c in range(NUM_CLASSES):
        tp = float(confusion[c, c])
        fp = float(confusion[:, c].sum()) - tp
        fn = float(confusion[c, :].sum()) - tp
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1.append(2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0)
    weighted_f1 = float(sum(support[c] / n * f1[c] for c in range(NUM_CLASSES)))
    macro_f1 = float(np.mean(f1))
    return EvalReport(confusion=confusion, accuracy=accuracy, per_class_f1=f1,
                      weighted_f1=weighted_f1, macro_f1=macro_f1,
                      support=[int(s) for s in support])


def ensemble_probs(member_probs: Sequence) -> np.ndarray:
    """Elementwise arithmetic mean of member probability matrices."""
    if len(member_probs) < 1:
        raise ConfigError("ensemble needs at least one member")
    arrays = [_as_prob_array(m) for m in member_probs]
    first = arrays[0].shape
    for i, a in enumerate(arrays[1:], start=1):
        if a.shape != first:
            raise ShapeError(f"member 0 has shape {first} but member {i} has {a.shape}")
    return np.mean(np.stack(arrays), axis=0)


def report_to_json(report: EvalReport) -> str:
    """Stable-byte JSON with scores at 6-decimal precision."""
    payload = {
        "accuracy": round(report.accuracy, 6),
        "confusion": report.confusion.tolist(),
        "macro_f1": round(report.macro_f1, 6),
        "num_samples": int(report.confusion.sum()),
        "per_class_f1": [round(v, 6) for v in report.per_class_f1],
        "support": report.support,
        "weighted_f1": round(report.weighted_f1, 6),
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_report(path, report: EvalReport):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report_to_json(report))
