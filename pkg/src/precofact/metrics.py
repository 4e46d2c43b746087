"""Weighted-F1 evaluation and confusion matrices over the 5 categories."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, NonFiniteError
from .model import CLASS_NAMES, NUM_CLASSES


@dataclass(frozen=True)
class EvalReport:
    per_class_f1: np.ndarray   # 5 floats in [0, 1]
    weighted_f1: float
    confusion: np.ndarray      # 5x5 counts, rows = true, cols = predicted
    support: np.ndarray        # 5 counts


def _as_class_ids(values, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.size < 1:
        raise ContractError(f"{what} must be a non-empty 1-d sequence")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == arr.astype(np.int64)):
            raise ContractError(f"{what} must be integer class ids")
        arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() >= NUM_CLASSES:
        raise ContractError(f"{what} contains ids outside 0-{NUM_CLASSES - 1}")
    return arr.astype(np.int64)


def evaluate(predictions: Sequence[int], labels: Sequence[int]) -> EvalReport:
    """Per-class F1 (0/0 := 0) and support-weighted F1.

    Classes absent from both labels and predictions score F1 = 0 with
    support 0 and contribute nothing to the weighted average.
    """
    preds = _as_class_ids(predictions, "predictions")
    truth = _as_class_ids(labels, "labels")
    if preds.shape != truth.shape:
        raise ContractError(
            f"length mismatch: {preds.size} predictions vs {truth.size} labels"
        )

    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)

    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    fp = confusion.sum(axis=0) - tp
    fn = support - tp

    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)

    weighted = float((support * f1).sum() / support.sum())
    return EvalReport(
        per_class_f1=f1,
        weighted_f1=weighted,
        confusion=confusion,
        support=support,
    )


def argmax_predict(probabilities) -> np.ndarray:
    """Class id of the highest score per row; ties go to the lowest index.

    Accepts any finite score rows, normalized or not, so ensemble outputs
    (whose rows need not sum to 1) can be decoded with the same function.
    """
    arr = np.asarray(probabilities, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != NUM_CLASSES:
        raise ContractError(
            f"expected a b x {NUM_CLASSES} score matrix, got shape {arr.shape}"
        )
    if not np.isfinite(arr).all():
        raise NonFiniteError("scores contain NaN or Inf")
    return arr.argmax(axis=1)


def report_json(report: EvalReport) -> str:
    """One machine-readable JSON line."""
    return json.dumps({
        "weighted_f1": report.weighted_f1,
        "per_class_f1": [float(x) for x in report.per_class_f1],
        "support": [int(x) for x in report.support],
        "confusion": report.confusion.tolist(),
    }, sort_keys=True)


def render_report(report: EvalReport) -> str:
    """Machine line first, then an aligned human-readable table."""
    lines = [report_json(report)]
    name_width = max(len(n) for n in CLASS_NAMES)
    lines.append(f"{'class':<{name_width}}  support      f1")
    for i, name in enumerate(CLASS_NAMES):
        lines.append(
            f"{name:<{name_width}}  {report.support[i]:>7d}  {report.per_class_f1[i]:.4f}"
        )
    lines.append(f"{'weighted F1':<{name_width}}  {'':>7}  {report.weighted_f1:.4f}")
    lines.append("confusion (rows = true, cols = predicted):")
    header = " " * name_width + "  " + "".join(f"{n[:4]:>8}" for n in CLASS_NAMES)
    lines.append(header)
    for i, name in enumerate(CLASS_NAMES):
        row = "".join(f"{int(c):>8d}" for c in report.confusion[i])
        lines.append(f"{name:<{name_width}}  {row}")
    return "\n".join(lines)
