"""Binary confusion matrices and macro-averaged classification metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are the true class, columns the predicted class (0 real, 1 fake)."""

    counts: tuple[tuple[int, int], tuple[int, int]]

    @classmethod
    def from_array(cls, arr) -> "ConfusionMatrix":
        arr = np.asarray(arr, dtype=np.int64)
        if arr.shape != (2, 2) or (arr < 0).any():
            raise ValueError(f"confusion counts must be a non-negative 2x2 table, got {arr.tolist()}")
        return cls(tuple(tuple(int(v) for v in row) for row in arr))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.array.sum())

    def to_list(self) -> list[list[int]]:
        return [list(r) for r in self.counts]


def confusion(preds: Sequence[int], labels: Sequence[int]) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() > 1):
            raise ValueError(f"{name} classes must be 0 or 1")
    counts = np.zeros((2, 2), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix.from_array(counts)


def accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise UndefinedMetricError("accuracy is undefined for an empty confusion matrix")
    return float(np.trace(cm.array)) / total


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


def per_class(cm: ConfusionMatrix) -> tuple[list[float], list[float], list[float]]:
    """Per-class precision, recall and F1 with 0/0 taken as 0."""
    a = cm.array.astype(float)
    precision = [_div(a[c, c], a[:, c].sum()) for c in range(2)]
    recall = [_div(a[c, c], a[c, :].sum()) for c in range(2)]
    f1 = [_div(2 * p * r, p + r) for p, r in zip(precision, recall)]
    return precision, recall, f1


def prf_macro(cm: ConfusionMatrix) -> tuple[float, float, float]:
    if cm.total == 0:
        raise UndefinedMetricError("macro metrics are undefined for an empty confusion matrix")
    precision, recall, f1 = per_class(cm)
    return float(np.mean(precision)), float(np.mean(recall)), float(np.mean(f1))


def summarize(cm: ConfusionMatrix) -> dict:
    p, r, f = prf_macro(cm)
    return {
        "accuracy": accuracy(cm),
        "precision_macro": p,
        "recall_macro": r,
        "f1_macro": f,
        "confusion": cm.to_list(),
    }


def write_report(cm: ConfusionMatrix, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summarize(cm), indent=1) + "\n")
    return path
