"""Classification metrics: confusion matrix, accuracy, precision/recall, macro AUC.

Ratios that would divide by zero come back as ``None`` and are written as
``undefined`` in CSV reports.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

UNDEFINED = "undefined"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(
    true_labels: Sequence[int],
    predicted_labels: Sequence[int],
    k: int,
    class_names: Sequence[str] | None = None,
) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise DataError(f"label sequences differ in length: {t.size} vs {p.size}")
    for arr, what in ((t, "true"), (p, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise DataError(f"{what} labels must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    return ConfusionMatrix(counts, names)


@dataclass
class Figures:
    accuracy: Fraction
    precision: list[Fraction | None]
    recall: list[Fraction | None]


def accuracy_precision_recall(cm: ConfusionMatrix) -> Figures:
    c = cm.counts
    if cm.total < 1:
        raise DataError("confusion matrix is empty")
    diag = np.diag(c)
    cols, rows = c.sum(axis=0), c.sum(axis=1)
    precision = [Fraction(int(d), int(s)) if s else None for d, s in zip(diag, cols)]
    recall = [Fraction(int(d), int(s)) if s else None for d, s in zip(diag, rows)]
    return Figures(Fraction(int(diag.sum()), cm.total), precision, recall)


@dataclass
class AucResult:
    macro: float | None
    per_class: list[float | None]
    incomplete: bool  # some class had no positives or no negatives


def macro_auc(scores: np.ndarray, true_labels: Sequence[int]) -> AucResult:
    """Unweighted mean of one-vs-rest AUCs (Mann-Whitney, ties earn half credit)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise DataError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    per_class: list[float | None] = []
    for c in range(scores.shape[1]):
        pos = labels == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            per_class.append(None)
            continue
        ranks = rankdata(scores[:, c])
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
        per_class.append(float(u / (n_pos * n_neg)))
    defined = [a for a in per_class if a is not None]
    macro = float(np.mean(defined)) if defined else None
    return AucResult(macro, per_class, len(defined) < len(per_class))


@dataclass
class MetricsReport:
    accuracy: float
    precision: list[float | None]
    recall: list[float | None]
    macro_auc: float | None
    mean_loss: float
    confusion: ConfusionMatrix


def evaluate(
    probs: np.ndarray, labels: Sequence[int], mean_loss: float, class_names: Sequence[str]
) -> MetricsReport:
    """Summarize predicted class probabilities against true labels.

    Predictions are the row argmax; ties go to the lowest class index.
    """
    k = probs.shape[1]
    cm = confusion(labels, np.argmax(probs, axis=1), k, class_names)
    figs = accuracy_precision_recall(cm)
    as_float = lambda xs: [None if x is None else float(x) for x in xs]  # noqa: E731
    return MetricsReport(
        float(figs.accuracy),
        as_float(figs.precision),
        as_float(figs.recall),
        macro_auc(probs, labels).macro,
        float(mean_loss),
        cm,
    )


# -- CSV reports -------------------------------------------------------------


def _fmt(x: float | None) -> str:
    return UNDEFINED if x is None else repr(float(x))


def metrics_header(class_names: Sequence[str]) -> list[str]:
    return (
        ["epoch", "split", "loss", "accuracy"]
        + [f"precision_{c}" for c in class_names]
        + [f"recall_{c}" for c in class_names]
        + ["macro_auc"]
    )


def metrics_row(epoch: int | str, split: str, report: MetricsReport) -> list[str]:
    return (
        [str(epoch), split, _fmt(report.mean_loss), _fmt(report.accuracy)]
        + [_fmt(p) for p in report.precision]
        + [_fmt(r) for r in report.recall]
        + [_fmt(report.macro_auc)]
    )


class MetricsLog:
    """Append-only metrics CSV, header written on creation."""

    def __init__(self, path: str | os.PathLike, class_names: Sequence[str]) -> None:
        self.path = path
        with open(path, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(metrics_header(class_names))

    def append(self, epoch: int | str, split: str, report: MetricsReport) -> None:
        with open(self.path, "a", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(metrics_row(epoch, split, report))


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\predicted", *cm.class_names])
    for name, row in zip(cm.class_names, cm.counts):
        writer.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()


def write_confusion_csv(cm: ConfusionMatrix, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(confusion_csv(cm))
