"""Classification metrics computed from a confusion matrix.

All scores are percentages. Macro averages are unweighted means over all
``K`` classes; a class with no ground-truth samples contributes 0 and is
listed in ``notes``. Weighted averages use class support as weights.
Precision of a never-predicted class is 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class MetricsReport:
    acc: float
    macro_f1: float
    macro_p: float
    macro_r: float
    weighted_f1: float
    weighted_p: float
    per_class_acc: list[float]
    confusion: list[list[int]]
    support: list[int]
    notes: list[str] = field(default_factory=list)

    HEADLINE = ("acc", "macro_f1", "macro_p", "macro_r", "weighted_f1", "weighted_p")
    SHORT = {"acc": "ACC", "macro_f1": "F1", "macro_p": "P", "macro_r": "R", "weighted_f1": "WF1", "weighted_p": "WP"}

    def headline(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.HEADLINE}

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "MetricsReport":
        return cls(**obj)


def confusion_matrix(y_true, y_pred, K: int) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def report_from_confusion(cm: np.ndarray) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty split: no samples to score")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    weights = support / total
    notes = []
    absent = np.flatnonzero(support == 0)
    if absent.size:
        notes.append(f"classes {absent.tolist()} have no ground-truth samples and count as 0 in macro averages")
    return MetricsReport(
        acc=100.0 * tp.sum() / total,
        macro_f1=100.0 * f1.mean(),
        macro_p=100.0 * precision.mean(),
        macro_r=100.0 * recall.mean(),
        weighted_f1=100.0 * float(weights @ f1),
        weighted_p=100.0 * float(weights @ precision),
        per_class_acc=(100.0 * recall).tolist(),
        confusion=cm.tolist(),
        support=support.astype(int).tolist(),
        notes=notes,
    )


def compute_metrics(y_true, y_pred, K: int) -> MetricsReport:
    if len(y_true) == 0:
        raise ValueError("empty split: no samples to score")
    return report_from_confusion(confusion_matrix(y_true, y_pred, K))


def per_class_f1(report: MetricsReport) -> np.ndarray:
    cm = np.asarray(report.confusion, dtype=np.float64)
    tp = np.diag(cm)
    p = _safe_div(tp, cm.sum(axis=0))
    r = _safe_div(tp, cm.sum(axis=1))
    return 100.0 * _safe_div(2 * p * r, p + r)


def average_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Mean of headline metrics across runs; confusion matrices are summed."""
    if not reports:
        raise ValueError("no reports to average")
    mean = lambda k: float(np.mean([getattr(r, k) for r in reports]))  # noqa: E731
    return MetricsReport(
        **{k: mean(k) for k in MetricsReport.HEADLINE},
        per_class_acc=np.mean([r.per_class_acc for r in reports], axis=0).tolist(),
        confusion=np.sum([r.confusion for r in reports], axis=0).tolist(),
        support=np.sum([r.support for r in reports], axis=0).tolist(),
        notes=sorted({n for r in reports for n in r.notes}),
    )
