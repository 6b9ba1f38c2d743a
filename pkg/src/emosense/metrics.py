"""Multiclass evaluation: confusion matrix, per-class precision/recall/F1,
and one-vs-rest ROC curves with trapezoid AUC."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass
class EvalReport:
    """Evaluation summary for a 3-class classifier.

    Confusion rows are actual classes, columns are predictions. A class
    absent from the test set gets None (not 0) for its undefined metrics.
    """

    accuracy: float
    precision: list[Optional[float]]
    recall: list[Optional[float]]
    f1: list[Optional[float]]
    confusion: list[list[int]]
    labels: list[str]
    roc: list[Optional[list[tuple[float, float]]]] = field(default_factory=list)
    auc: list[Optional[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": self.confusion,
            "labels": self.labels,
            "roc": [
                [[float(f), float(t)] for f, t in curve] if curve is not None else None
                for curve in self.roc
            ],
            "auc": self.auc,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(
            accuracy=doc["accuracy"],
            precision=doc["precision"],
            recall=doc["recall"],
            f1=doc["f1"],
            confusion=[[int(v) for v in row] for row in doc["confusion"]],
            labels=list(doc["labels"]),
            roc=[
                [(float(f), float(t)) for f, t in curve] if curve is not None else None
                for curve in doc.get("roc", [])
            ],
            auc=doc.get("auc", []),
        )


def confusion_matrix(actual: Sequence[int], predicted: Sequence[int], n_classes: int) -> list[list[int]]:
    if len(actual) != len(predicted):
        raise ValueError("actual and predicted lengths differ")
    matrix = [[0] * n_classes for _ in range(n_classes)]
    for a, p in zip(actual, predicted):
        matrix[int(a)][int(p)] += 1
    return matrix


def metrics_from_confusion(matrix: Sequence[Sequence[int]], labels: Sequence[str]) -> EvalReport:
    """Accuracy and per-class precision/recall/F1 from counts alone."""
    n = len(labels)
    m = [[int(v) for v in row] for row in matrix]
    if len(m) != n or any(len(row) != n for row in m):
        raise ValueError(f"confusion matrix must be {n}x{n}")
    if any(v < 0 for row in m for v in row):
        raise ValueError("confusion entries must be non-negative")
    total = sum(sum(row) for row in m)
    if total == 0:
        raise ValueError("confusion matrix is empty")
    accuracy = sum(m[i][i] for i in range(n)) / total

    precision: list[Optional[float]] = []
    recall: list[Optional[float]] = []
    f1: list[Optional[float]] = []
    for c in range(n):
        col = sum(m[r][c] for r in range(n))
        row = sum(m[c])
        p = m[c][c] / col if col > 0 else None
        r = m[c][c] / row if row > 0 else None
        precision.append(p)
        recall.append(r)
        if p is None or r is None:
            f1.append(None)
        elif p + r == 0:
            f1.append(0.0)
        else:
            f1.append(2 * p * r / (p + r))
    return EvalReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        confusion=m,
        labels=list(labels),
    )


def roc_curve(is_positive: np.ndarray, scores: np.ndarray) -> list[tuple[float, float]]:
    """One-vs-rest ROC points (fpr, tpr), from (0,0) to (1,1), by sweeping
    a threshold down through the scores."""
    is_positive = np.asarray(is_positive, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(is_positive.sum())
    n_neg = len(is_positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative examples")
    order = np.argsort(-scores, kind="stable")
    tps = np.cumsum(is_positive[order])
    fps = np.cumsum(~is_positive[order])
    # keep only the last point of each tied-score run
    distinct = np.append(np.diff(scores[order]) != 0, True)
    points = [(0.0, 0.0)]
    for tp, fp in zip(tps[distinct], fps[distinct]):
        points.append((fp / n_neg, tp / n_pos))
    return points


def auc_trapezoid(points: Sequence[tuple[float, float]]) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.trapezoid(tpr, fpr))


def evaluate_predictions(
    actual: Sequence[int],
    predicted: Sequence[int],
    probabilities: Optional[np.ndarray],
    labels: Sequence[str],
) -> EvalReport:
    """Full report: count-based metrics plus per-class ROC/AUC when class
    probability scores are available."""
    n = len(labels)
    report = metrics_from_confusion(confusion_matrix(actual, predicted, n), labels)
    if probabilities is None:
        return report
    probabilities = np.asarray(probabilities, dtype=float)
    actual_arr = np.asarray(actual, dtype=int)
    roc: list[Optional[list[tuple[float, float]]]] = []
    auc: list[Optional[float]] = []
    for c in range(n):
        positive = actual_arr == c
        if positive.all() or not positive.any():
            roc.append(None)
            auc.append(None)
            continue
        points = roc_curve(positive, probabilities[:, c])
        roc.append(points)
        auc.append(auc_trapezoid(points))
    report.roc = roc
    report.auc = auc
    return report


def format_report(report: EvalReport) -> str:
    """Render the confusion matrix and metric summary as a text table."""
    labels = report.labels
    width = max(8, max(len(l) for l in labels) + 2)
    lines = []
    lines.append("Confusion matrix (rows=actual, cols=predicted)")
    header = " " * width + "".join(f"{l:>{width}}" for l in labels)
    lines.append(header)
    for label, row in zip(labels, report.confusion):
        lines.append(f"{label:<{width}}" + "".join(f"{v:>{width}}" for v in row))
    lines.append("")
    lines.append(f"accuracy  {report.accuracy:.4f}")

    def fmt(value: Optional[float]) -> str:
        return f"{value:.4f}" if value is not None else "n/a"

    lines.append(f"{'class':<{width}}{'precision':>10}{'recall':>10}{'f1':>10}" + (
        f"{'auc':>10}" if report.auc else ""))
    for c, label in enumerate(labels):
        row = f"{label:<{width}}{fmt(report.precision[c]):>10}{fmt(report.recall[c]):>10}{fmt(report.f1[c]):>10}"
        if report.auc:
            row += f"{fmt(report.auc[c]):>10}"
        lines.append(row)
    return "\n".join(lines)
