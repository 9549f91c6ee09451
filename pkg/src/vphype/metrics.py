"""Confusion matrix accumulation and OA / AA / Cohen's kappa."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyEvaluationError, LabelError


@dataclass
class ConfusionMatrix:
    """Counts with rows = ground truth and columns = prediction."""

    counts: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n = self.counts.shape[0]
        if self.counts.ndim != 2 or self.counts.shape[1] != n:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion matrix entries must be non-negative")
        if not self.class_names:
            self.class_names = [f"class_{i}" for i in range(n)]

    @classmethod
    def empty(cls, num_classes: int, class_names: Optional[Sequence[str]] = None) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), list(class_names or []))

    @classmethod
    def from_predictions(
        cls, labels: Sequence[int], predictions: Sequence[int], num_classes: int, class_names=None
    ) -> "ConfusionMatrix":
        cm = cls.empty(num_classes, class_names)
        cm.update(labels, predictions)
        return cm

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, labels: Sequence[int], predictions: Sequence[int]) -> None:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
        n = self.num_classes
        for name, arr in (("label", labels), ("prediction", predictions)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise LabelError(f"{name} outside [0, {n})")
        np.add.at(self.counts, (labels, predictions), 1)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ValueError(f"cannot merge confusion matrices of shapes {self.counts.shape} and {other.counts.shape}")
        return ConfusionMatrix(self.counts + other.counts, list(self.class_names))


@dataclass
class Metrics:
    overall_accuracy: float
    average_accuracy: float
    kappa: float
    per_class_recall: list[Optional[float]]
    skipped_classes: list[int]
    kappa_degenerate: bool = False

    def as_dict(self) -> dict:
        return {
            "OA": self.overall_accuracy,
            "AA": self.average_accuracy,
            "Kappa": self.kappa,
            "per_class_recall": self.per_class_recall,
            "skipped_classes": self.skipped_classes,
            "kappa_degenerate": self.kappa_degenerate,
        }


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise EmptyEvaluationError("confusion matrix is empty; nothing was evaluated")
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    p_o = diag.sum() / total
    present = rows > 0
    recall = [float(diag[i] / rows[i]) if present[i] else None for i in range(cm.num_classes)]
    aa = float(np.mean(diag[present] / rows[present]))
    p_e = float((rows * cols).sum() / (total * total))
    degenerate = bool(np.isclose(p_e, 1.0, rtol=0.0, atol=1e-15))
    if degenerate:
        kappa = 1.0 if p_o == 1.0 else 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    skipped = [i for i in range(cm.num_classes) if not present[i]]
    return Metrics(float(p_o), aa, float(kappa), recall, skipped, degenerate)


def evaluation_report(cm: ConfusionMatrix, extra: Optional[dict] = None) -> str:
    """Deterministic key-sorted JSON with overall metrics, per-class recalls and raw counts."""
    m = compute_metrics(cm)
    doc = {
        "overall": {"OA": m.overall_accuracy, "AA": m.average_accuracy, "Kappa": m.kappa},
        "kappa_degenerate": m.kappa_degenerate,
        "per_class": {
            name: {"index": i, "recall": m.per_class_recall[i], "support": int(cm.counts[i].sum())}
            for i, name in enumerate(cm.class_names)
        },
        "skipped_classes": [cm.class_names[i] for i in m.skipped_classes],
        "confusion_matrix": cm.counts.tolist(),
        "class_names": list(cm.class_names),
        "total": cm.total,
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=2)
