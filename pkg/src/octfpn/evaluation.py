"""Confusion matrices, accuracy / sensitivity / specificity and fold aggregation."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

METRIC_COLUMNS = ("accuracy", "sensitivity", "specificity", "weighted_cce_loss")
COLUMN_TITLES = {
    "accuracy": "Accuracy (%)",
    "sensitivity": "Sensitivity (%)",
    "specificity": "Specificity (%)",
    "weighted_cce_loss": "Weighted CCE Loss",
}


def predict_labels(probs) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.asarray(probs).argmax(axis=1)


def confusion_matrix(true_labels, probs, n_classes: int | None = None) -> np.ndarray:
    """Rows are true classes, columns argmax predictions."""
    true_labels = np.asarray(true_labels, dtype=int)
    probs = np.asarray(probs)
    if probs.ndim != 2 or len(true_labels) != len(probs):
        raise ValueError(f"{len(true_labels)} labels but {len(probs)} prediction rows")
    n = probs.shape[1] if n_classes is None else n_classes
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (true_labels, predict_labels(probs)), 1)
    return cm


def per_class_rates(cm) -> tuple[np.ndarray, np.ndarray]:
    """One-vs-rest sensitivity and specificity per class (NaN where undefined)."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    tp = np.diag(cm)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = total - tp - fn - fp
    with np.errstate(invalid="ignore", divide="ignore"):
        sens = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
        spec = np.where(tn + fp > 0, tn / (tn + fp), np.nan)
    return sens, spec


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    weighted_cce_loss: float | None = None
    averaging: str = "macro"
    per_class_sensitivity: list[float] = field(default_factory=list)
    per_class_specificity: list[float] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "weighted_cce_loss": self.weighted_cce_loss,
            "averaging": self.averaging,
            "per_class_sensitivity": self.per_class_sensitivity,
            "per_class_specificity": self.per_class_specificity,
            "confusion": self.confusion,
        }


def metrics(cm, weighted_loss: float | None = None, averaging: str = "macro") -> MetricsReport:
    """Percent accuracy and macro (or micro) one-vs-rest sensitivity/specificity."""
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    sens, spec = per_class_rates(cm)
    if np.isnan(sens).any():
        missing = [int(c) for c in np.flatnonzero(np.isnan(sens))]
        warnings.warn(f"classes {missing} have no true instances; excluded from the sensitivity average")
    if averaging == "macro":
        sensitivity = float(np.nanmean(sens))
        specificity = float(np.nanmean(spec))
    elif averaging == "micro":
        c = cm.astype(np.float64)
        tp = np.diag(c).sum()
        fn = (c.sum(axis=1) - np.diag(c)).sum()
        fp = (c.sum(axis=0) - np.diag(c)).sum()
        tn = (total - np.diag(c) - (c.sum(axis=1) - np.diag(c)) - (c.sum(axis=0) - np.diag(c))).sum()
        sensitivity = float(tp / (tp + fn))
        specificity = float(tn / (tn + fp))
    else:
        raise ValueError(f"averaging must be 'macro' or 'micro', got {averaging!r}")
    to_list = lambda a: [None if math.isnan(v) else 100.0 * float(v) for v in a]  # noqa: E731
    return MetricsReport(
        accuracy=100.0 * float(np.trace(cm)) / total,
        sensitivity=100.0 * sensitivity,
        specificity=100.0 * specificity,
        weighted_cce_loss=None if weighted_loss is None else float(weighted_loss),
        averaging=averaging,
        per_class_sensitivity=to_list(sens),
        per_class_specificity=to_list(spec),
        confusion=cm.tolist(),
    )


def aggregate_folds(reports: Sequence[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation (n - 1) of every metric across folds."""
    if len(reports) < 2:
        raise ValueError("aggregation needs at least two folds")
    out = {}
    for col in METRIC_COLUMNS:
        values = [getattr(r, col) for r in reports]
        if any(v is None for v in values):
            continue
        arr = np.asarray(values, dtype=np.float64)
        out[col] = (float(arr.mean()), float(arr.std(ddof=1)))
    return out


def format_table(rows: Sequence[tuple[str, dict]]) -> str:
    """Aligned plain-text table; each row is ``(label, {metric: (mean, std) or value})``."""
    headers = ["Model"] + [COLUMN_TITLES[c] for c in METRIC_COLUMNS]
    body = []
    for label, values in rows:
        cells = [label]
        for col in METRIC_COLUMNS:
            v = values.get(col)
            if v is None:
                cells.append("-")
            elif isinstance(v, tuple):
                fmt = "{:.2f} ± {:.2f}" if col == "weighted_cce_loss" else "{:.1f} ± {:.1f}"
                cells.append(fmt.format(*v))
            else:
                cells.append(f"{v:.2f}" if col == "weighted_cce_loss" else f"{v:.1f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [headers] + body) for i in range(len(headers))]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    return "\n".join([line(headers), line(["-" * w for w in widths])] + [line(r) for r in body]) + "\n"


def report_json(per_fold: Sequence[MetricsReport], aggregate: dict | None, extra: dict | None = None) -> str:
    payload = {
        "folds": [r.to_dict() for r in per_fold],
        "aggregate": {k: {"mean": m, "std": s} for k, (m, s) in (aggregate or {}).items()},
    }
    if extra:
        payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
