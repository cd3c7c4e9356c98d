"""Classification metrics: confusion matrix, per-class P/R/F1, ROC and AUC."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from .data import ClipRecord, Pipeline, batch_iter
from .errors import DataError, ShapeError, UndefinedMetricError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) int64, rows = true class, columns = predicted

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class ClassMetrics:
    cls: int
    precision: float
    recall: float
    f1: float
    support: int
    zero_division: bool = False


@dataclass
class RocResult:
    cls: int
    points: list  # (fpr, tpr), starting at (0, 0) and ending at (1, 1)
    auc: float


def confusion(true, pred, num_classes: int) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if true.shape != pred.shape:
        raise ShapeError(f"label vectors differ in length: {true.size} vs {pred.size}")
    for name, v in (("true", true), ("predicted", pred)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise DataError(f"{name} labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


def precision_recall_f1(cm: ConfusionMatrix) -> list[ClassMetrics]:
    """Per-class metrics; any 0/0 ratio is reported as 0 and flagged."""
    c = cm.counts
    out = []
    for k in range(cm.num_classes):
        tp = int(c[k, k])
        predicted = int(c[:, k].sum())
        actual = int(c[k, :].sum())
        flagged = predicted == 0 or actual == 0
        p = tp / predicted if predicted else 0.0
        r = tp / actual if actual else 0.0
        if p + r > 0:
            f1 = 2 * p * r / (p + r)
        else:
            f1 = 0.0
            flagged = True
        out.append(ClassMetrics(k, p, r, f1, actual, flagged))
    return out


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size, dtype=np.float64)
    start = 0
    n = values.size
    while start < n:
        end = start
        while end + 1 < n and sorted_vals[end + 1] == sorted_vals[start]:
            end += 1
        ranks[order[start:end + 1]] = (start + end) / 2.0 + 1.0
        start = end + 1
    return ranks


def binary_auc(scores, positive) -> float:
    """Rank-statistic AUC of ``scores`` for a boolean ``positive`` mask."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positive = np.asarray(positive, dtype=bool).reshape(-1)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    ranks = midranks(scores)
    return (ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve(scores, positive) -> list[tuple[float, float]]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positive = np.asarray(positive, dtype=bool).reshape(-1)
    n_pos = positive.sum()
    n_neg = positive.size - n_pos
    points = [(0.0, 0.0)]
    for thr in np.unique(scores)[::-1]:
        hit = scores >= thr
        points.append((float((hit & ~positive).sum() / n_neg), float((hit & positive).sum() / n_pos)))
    return points


def roc_auc(scores, labels, cls: int) -> RocResult:
    """One-vs-rest ROC for column ``cls`` of a (N, K) probability matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise ShapeError(f"scores must be (N, K) with N = {labels.size}, got {scores.shape}")
    if not np.allclose(scores.sum(axis=1), 1.0, rtol=0, atol=1e-5):
        raise DataError("score rows must each sum to 1 within 1e-5")
    positive = labels == cls
    auc = binary_auc(scores[:, cls], positive)
    return RocResult(cls, roc_curve(scores[:, cls], positive), auc)


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    classes: list  # ClassMetrics
    aucs: list     # float or None per class
    glosses: list
    confusion: ConfusionMatrix
    samples: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "classes": [
                {"class": c.cls, "gloss": self.glosses[c.cls], "precision": c.precision,
                 "recall": c.recall, "f1": c.f1, "support": c.support, "auc": self.aucs[c.cls]}
                for c in self.classes
            ],
            "confusion": self.confusion.counts.tolist(),
            "zero_division_classes": [c.cls for c in self.classes if c.zero_division],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def report_from_predictions(labels, preds, scores, num_classes: int,
                            glosses: Sequence[str] | None = None) -> MetricsReport:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.size == 0:
        raise DataError("cannot build a report from zero samples")
    cm = confusion(labels, preds, num_classes)
    rows = precision_recall_f1(cm)
    aucs: list = []
    for k in range(num_classes):
        if scores is None:
            aucs.append(None)
            continue
        try:
            aucs.append(roc_auc(scores, labels, k).auc)
        except UndefinedMetricError:
            aucs.append(None)
    glosses = list(glosses) if glosses else [f"class_{k}" for k in range(num_classes)]
    return MetricsReport(
        accuracy=float(np.trace(cm.counts) / cm.total),
        macro_f1=float(np.mean([r.f1 for r in rows])),
        classes=rows,
        aucs=aucs,
        glosses=glosses,
        confusion=cm,
    )


def evaluate(model: M.SignNet, records: Sequence[ClipRecord], config: M.ModelConfig | None = None,
             glosses: Sequence[str] | None = None, batch_size: int = 2) -> MetricsReport:
    """Deterministic-pipeline evaluation; per-sample dumps go to ``report.samples``."""
    if not records:
        raise DataError("no records to evaluate")
    config = config or model.config
    pipeline = Pipeline(config)
    labels, preds, probs = [], [], []
    for x, y in batch_iter(records, batch_size, False, None, pipeline):
        p = M.predict_proba(model, x)
        probs.append(p)
        labels.append(y)
        preds.append(np.argmax(p, axis=1))
    labels = np.concatenate(labels)
    preds = np.concatenate(preds)
    probs = np.concatenate(probs)
    report = report_from_predictions(labels, preds, probs, config.num_classes, glosses)
    report.samples = [
        {"path": r.path, "label": int(l), "pred": int(p), "scores": s.tolist()}
        for r, l, p, s in zip(records, labels, preds, probs)
    ]
    return report
