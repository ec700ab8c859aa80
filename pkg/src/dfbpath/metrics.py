"""Confusion matrices, the five summary scores and distance-binned analyses."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .tiling import CLASS_NAMES, N_CLASSES

TABLE_COLUMNS = ["Acc.", "mRecall", "mPrec.", "F1", "mIoU"]


@dataclass
class MetricsReport:
    accuracy: float
    m_recall: float
    m_precision: float
    f1: float
    m_iou: float
    recall: List[float]
    precision: List[float]
    iou: List[float]
    support: List[int]
    flags: List[str] = field(default_factory=list)

    def row(self) -> List[float]:
        return [self.accuracy, self.m_recall, self.m_precision, self.f1, self.m_iou]

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """``counts[t, p]`` = number of samples with truth ``t`` predicted as ``p``."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.size} truths vs {y_pred.size} predictions")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} has labels outside 0..{n_classes - 1}")
    flat = np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes)


def _ratio(num, den, what, c, flags):
    if den == 0:
        flags.append(f"{what}[{c}]: zero denominator")
        return 0.0
    return float(num) / float(den)


def compute_metrics(cm) -> MetricsReport:
    """Accuracy, mRecall, mPrecision, F1 and mIoU from a confusion matrix.

    Means are unweighted over classes. A class whose denominator is zero
    contributes 0 and is recorded in ``flags``. F1 is the harmonic mean of
    mRecall and mPrecision.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    m = cm.shape[0]
    tp = np.diag(cm)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    flags: List[str] = []
    recall = [_ratio(tp[c], tp[c] + fn[c], "recall", c, flags) for c in range(m)]
    precision = [_ratio(tp[c], tp[c] + fp[c], "precision", c, flags) for c in range(m)]
    iou = [_ratio(tp[c], tp[c] + fp[c] + fn[c], "iou", c, flags) for c in range(m)]
    m_recall = sum(recall) / m
    m_precision = sum(precision) / m
    return MetricsReport(
        accuracy=float(tp.sum()) / float((tp + fn).sum()),
        m_recall=m_recall,
        m_precision=m_precision,
        f1=f1_score(m_recall, m_precision),
        m_iou=sum(iou) / m,
        recall=recall,
        precision=precision,
        iou=iou,
        support=[int(s) for s in cm.sum(axis=1)],
        flags=flags,
    )


def f1_score(m_recall: float, m_precision: float) -> float:
    den = m_recall + m_precision
    return 0.0 if den == 0 else 2.0 * m_recall * m_precision / den


def normalize_rows(cm) -> np.ndarray:
    """Row-normalised confusion matrix; the diagonal holds per-class recall."""
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)


def _bins(dfb, bin_width):
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    return np.floor(np.asarray(dfb, dtype=np.float64) / bin_width).astype(np.int64)


def recall_by_distance(
    dfb, y_true, y_pred, bin_width: float = 1.0, average: str = "macro"
) -> Dict[int, float]:
    """Mean recall per DfB bin, keyed by bin index ``floor(dfb / bin_width)``.

    ``macro`` averages per-class recall over the classes present in the bin;
    ``micro`` is the pooled accuracy of the bin. Empty bins are absent.
    """
    if average not in ("macro", "micro"):
        raise ValueError(f"average must be 'macro' or 'micro', got {average!r}")
    bins = _bins(dfb, bin_width)
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    out = {}
    for b in np.unique(bins):
        sel = bins == b
        t, p = y_true[sel], y_pred[sel]
        if average == "micro":
            out[int(b)] = float(np.mean(t == p))
        else:
            out[int(b)] = float(np.mean([np.mean(p[t == c] == c) for c in np.unique(t)]))
    return out


def curve_difference(a: Dict[int, float], b: Dict[int, float]) -> Dict[int, float]:
    """``a - b`` on the bins both curves share."""
    return {k: a[k] - b[k] for k in sorted(a.keys() & b.keys())}


def dfb_class_histogram(
    dfb, labels, bin_width: float = 1.0, n_classes: int = N_CLASSES
) -> Dict[int, Dict[int, float]]:
    """Per class, the fraction of its patches falling in each DfB bin.

    Classes without samples map to an empty dict.
    """
    bins = _bins(dfb, bin_width)
    labels = np.asarray(labels)
    out = {}
    for c in range(n_classes):
        b = bins[labels == c]
        if b.size == 0:
            out[c] = {}
            continue
        keys, counts = np.unique(b, return_counts=True)
        out[c] = {int(k): float(n) / b.size for k, n in zip(keys, counts)}
    return out


# -- reports -----------------------------------------------------------------


def write_metrics_csv(path, reports: Dict[str, MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Method"] + TABLE_COLUMNS)
        for name, rep in reports.items():
            writer.writerow([name] + [f"{v:.4f}" for v in rep.row()])


def write_metrics_json(path, reports: Dict[str, MetricsReport], confusions: Optional[dict] = None) -> None:
    payload = {}
    for name, rep in reports.items():
        entry = rep.to_dict()
        entry["classes"] = list(CLASS_NAMES)
        if confusions and name in confusions:
            entry["confusion"] = np.asarray(confusions[name]).tolist()
            entry["confusion_normalized"] = normalize_rows(confusions[name]).tolist()
        payload[name] = entry
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_curve_csv(path, curve: Dict[int, float], bin_width: float = 1.0) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "value"])
        for b in sorted(curve):
            writer.writerow([repr(b * bin_width), repr(curve[b])])


def format_table(reports: Dict[str, MetricsReport]) -> str:
    width = max([len("Method")] + [len(n) for n in reports])
    lines = ["  ".join([f"{'Method':<{width}}"] + [f"{c:>7}" for c in TABLE_COLUMNS])]
    for name, rep in reports.items():
        vals = [f"{v:7.3f}" if math.isfinite(v) else "    nan" for v in rep.row()]
        lines.append("  ".join([f"{name:<{width}}"] + vals))
    return "\n".join(lines)
