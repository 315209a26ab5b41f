"""Classification metrics: accuracy, per-class and averaged P/R/F1, confusion.

Reported averages are support-weighted (so the average recall always equals
accuracy); macro averages are included alongside for completeness. Classes
with zero support or zero predictions get precision/recall 0 and a warning
rather than NaN.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with true labels on rows and predicted labels on columns."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label shapes differ: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise DataError("cannot compute metrics on an empty set")
    if (y_true.min() < 0 or y_true.max() >= num_classes
            or y_pred.min() < 0 or y_pred.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass
class MetricsReport:
    accuracy: float
    precision: tuple[float, ...]  # per class
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: list[list[int]]
    sample_count: int
    class_names: tuple[str, ...] = ()
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": {
                "precision": list(self.precision),
                "recall": list(self.recall),
                "f1": list(self.f1),
            },
            "weighted": {"precision": self.weighted_precision,
                         "recall": self.weighted_recall,
                         "f1": self.weighted_f1},
            "macro": {"precision": self.macro_precision,
                      "recall": self.macro_recall,
                      "f1": self.macro_f1},
            "confusion_matrix": self.confusion,
            "sample_count": self.sample_count,
            "class_names": list(self.class_names),
            "warnings": list(self.warnings),
        }

    def render_table(self) -> str:
        names = self.class_names or tuple(
            f"class-{i}" for i in range(len(self.precision)))
        lines = [f"samples: {self.sample_count}   accuracy: {self.accuracy:.4f}",
                 f"{'class':<16}{'precision':>10}{'recall':>10}{'f1':>10}"]
        for i, name in enumerate(names):
            lines.append(f"{name:<16}{self.precision[i]:>10.4f}"
                         f"{self.recall[i]:>10.4f}{self.f1[i]:>10.4f}")
        lines.append(f"{'weighted avg':<16}{self.weighted_precision:>10.4f}"
                     f"{self.weighted_recall:>10.4f}{self.weighted_f1:>10.4f}")
        lines.append(f"{'macro avg':<16}{self.macro_precision:>10.4f}"
                     f"{self.macro_recall:>10.4f}{self.macro_f1:>10.4f}")
        for warning in self.warnings:
            lines.append(f"warning: {warning}")
        return "\n".join(lines)

    def confusion_csv(self) -> str:
        names = self.class_names or tuple(
            f"class-{i}" for i in range(len(self.precision)))
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["true\\pred", *names])
        for name, row in zip(names, self.confusion):
            writer.writerow([name, *row])
        return buf.getvalue()


def metrics_from_confusion(cm: np.ndarray,
                           class_names: tuple[str, ...] = ()) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    if n == 0:
        raise DataError("cannot compute metrics on an empty set")
    diag = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)   # true counts per class
    predicted = cm.sum(axis=0).astype(np.float64)
    warnings = []
    for i in np.nonzero(support == 0)[0]:
        warnings.append(f"class {i} has zero support; its recall is reported as 0")
    for i in np.nonzero(predicted == 0)[0]:
        warnings.append(
            f"class {i} was never predicted; its precision is reported as 0")

    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, diag / predicted, 0.0)
        recall = np.where(support > 0, diag / support, 0.0)
        pr_sum = precision + recall
        f1 = np.where(pr_sum > 0, 2 * precision * recall / pr_sum, 0.0)

    weights = support / n
    accuracy = float(diag.sum() / n)
    k = cm.shape[0]
    return MetricsReport(
        accuracy=accuracy,
        precision=tuple(precision.tolist()),
        recall=tuple(recall.tolist()),
        f1=tuple(f1.tolist()),
        weighted_precision=float((weights * precision).sum()),
        weighted_recall=float((weights * recall).sum()),
        weighted_f1=float((weights * f1).sum()),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=cm.tolist(),
        sample_count=n,
        class_names=tuple(class_names) if class_names else tuple(
            f"class-{i}" for i in range(k)),
        warnings=warnings,
    )


def metrics_from_predictions(y_true, y_pred, num_classes: int,
                             class_names: tuple[str, ...] = ()) -> MetricsReport:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes),
                                  class_names)


def predict(net: torch.nn.Module, images: np.ndarray, *, batch_size: int = 256,
            prepare) -> np.ndarray:
    """Argmax predictions over ``images`` in deterministic order.

    ``prepare`` maps a uint8 image batch to the float tensor the network
    expects (normalization, channel replication); see data.batch_preparer.
    """
    was_training = net.training
    net.eval()
    preds = []
    with torch.no_grad():
        for lo in range(0, len(images), batch_size):
            x = prepare(images[lo: lo + batch_size])
            preds.append(net(x).argmax(dim=1).cpu().numpy())
    if was_training:
        net.train()
    return np.concatenate(preds)


def evaluate(net: torch.nn.Module, images: np.ndarray, labels: np.ndarray, *,
             num_classes: int, prepare, batch_size: int = 256,
             class_names: tuple[str, ...] = ()) -> MetricsReport:
    """Deterministic metrics for ``net`` over a full split."""
    if len(images) == 0:
        raise DataError("cannot evaluate on an empty split")
    preds = predict(net, images, batch_size=batch_size, prepare=prepare)
    return metrics_from_predictions(labels, preds, num_classes, class_names)
