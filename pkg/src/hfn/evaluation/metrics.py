"""Accuracy, macro F1 and per-class precision/recall/F1."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from hfn.errors import ValidationError


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class: dict[str, dict[str, float]]
    n: int
    provenance: dict = field(default_factory=dict)

    @property
    def classes(self) -> list[str]:
        return list(self.per_class)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class,
            "n": self.n,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(obj["accuracy"], obj["macro_f1"], obj["per_class"], obj["n"], obj.get("provenance", {}))

    def table_row(self) -> dict[str, float]:
        """Columns: Accuracy, Macro F1, then Precision/Recall/F1 for each class."""
        row = {"Accuracy": self.accuracy, "Macro F1": self.macro_f1}
        for name, m in self.per_class.items():
            row[f"{name} Precision"] = m["precision"]
            row[f"{name} Recall"] = m["recall"]
            row[f"{name} F1"] = m["f1"]
        return row


def _to_indices(labels, classes: Sequence[str]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(classes)}
    out = np.empty(len(labels), dtype=np.int64)
    for j, lab in enumerate(labels):
        if isinstance(lab, (int, np.integer)) and not isinstance(lab, bool):
            if not 0 <= lab < len(classes):
                raise ValidationError(f"label index {lab} outside 0..{len(classes) - 1}")
            out[j] = lab
        elif lab in lookup:
            out[j] = lookup[lab]
        else:
            raise ValidationError(f"unknown label {lab!r}; expected one of {list(classes)}")
    return out


def confusion_matrix(preds, truth, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth), np.asarray(preds)), 1)
    return cm


def compute_metrics(preds, truth, classes: Sequence[str], provenance: dict | None = None) -> MetricsReport:
    """Metrics over the expected ``classes``; labels may be class names or indices.

    Every expected class counts toward macro F1, including ones that never
    occur. Precision with no predicted positives, recall with no support and
    F1 with P + R = 0 are all taken as 0.
    """
    if len(preds) != len(truth):
        raise ValidationError(f"{len(preds)} predictions for {len(truth)} labels")
    if len(truth) == 0:
        raise ValidationError("cannot score an empty prediction set")
    p = _to_indices(preds, classes)
    t = _to_indices(truth, classes)
    cm = confusion_matrix(p, t, len(classes))
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    per_class = {
        name: {"precision": float(precision[i]), "recall": float(recall[i]), "f1": float(f1[i]),
               "support": int(support[i])}
        for i, name in enumerate(classes)
    }
    return MetricsReport(
        accuracy=float(tp.sum() / len(t)),
        macro_f1=float(f1.mean()),
        per_class=per_class,
        n=len(t),
        provenance=dict(provenance or {}),
    )


def merge_ambiguous(labels, classes: Sequence[str], into: str = "Fake", merged: str = "Ambiguous"):
    """Fold one class into another at evaluation time (3-class -> Fake(+Ambiguous)/Real).

    Returns ``(index labels over the reduced vocabulary, reduced class list)``.
    """
    classes = list(classes)
    if merged not in classes:
        raise ValidationError(f"class {merged!r} is not in {classes}")
    idx = _to_indices(labels, classes)
    reduced = [c for c in classes if c != merged]
    remap = np.array([reduced.index(into if c == merged else c) for c in classes])
    return remap[idx], reduced


def mean_report(reports: Sequence[MetricsReport], provenance: dict | None = None) -> MetricsReport:
    """Unweighted mean of several reports; supports are summed."""
    if not reports:
        raise ValidationError("no reports to average")
    classes = reports[0].classes
    per_class = {}
    for name in classes:
        per_class[name] = {
            key: float(np.mean([r.per_class[name][key] for r in reports]))
            for key in ("precision", "recall", "f1")
        }
        per_class[name]["support"] = int(sum(r.per_class[name]["support"] for r in reports))
    prov = {"repetitions": [r.provenance for r in reports]}
    prov.update(provenance or {})
    return MetricsReport(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        macro_f1=float(np.mean([r.macro_f1 for r in reports])),
        per_class=per_class,
        n=int(sum(r.n for r in reports)),
        provenance=prov,
    )


def reports_to_csv(rows: dict[str, MetricsReport], first_column: str = "Configuration", scale: float = 100.0) -> str:
    """One CSV row per configuration; metric values are scaled (percent by default) and rounded to 2 places."""
    buf = io.StringIO()
    writer = None
    for name, report in rows.items():
        row = {first_column: name}
        row.update({k: f"{v * scale:.2f}" for k, v in report.table_row().items()})
        if writer is None:
            writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
            writer.writeheader()
        writer.writerow(row)
    return buf.getvalue()


def dumps(obj) -> str:
    """Canonical JSON used for every metrics artifact (sorted keys, fixed indentation)."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
