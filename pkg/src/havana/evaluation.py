"""Confusion matrices, OA / F1 metrics, error maps and mined-pair purity."""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError


@dataclass
class Metrics:
    oa: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    avg_f1: float


def confusion(pred, truth, n_classes=None):
    """Counts indexed ``[truth, prediction]``."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ArgumentError(f"length mismatch: {len(pred)} predictions vs {len(truth)} labels")
    if np.any(pred < 0) or np.any(truth < 0):
        raise ArgumentError("labels must be non-negative")
    if n_classes is None:
        n_classes = int(max(pred.max(initial=-1), truth.max(initial=-1))) + 1
    if np.any(pred >= n_classes) or np.any(truth >= n_classes):
        raise ArgumentError(f"labels must be < {n_classes}")
    flat = truth * n_classes + pred
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def metrics(m):
    """Overall accuracy, per-class precision/recall/F1 and their unweighted mean.

    Any ratio with a zero denominator is reported as 0.
    """
    m = np.asarray(m)
    total = m.sum()
    if m.ndim != 2 or m.shape[0] != m.shape[1] or total <= 0:
        raise ArgumentError("need a non-empty square confusion matrix")
    tp = np.diag(m).astype(np.float64)
    precision = _ratio(tp, m.sum(axis=0))
    recall = _ratio(tp, m.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    return Metrics(
        oa=float(tp.sum() / total),
        precision=precision,
        recall=recall,
        f1=f1,
        avg_f1=float(f1.mean()),
    )


def error_map(pred, truth, cloud):
    """Copy of ``cloud`` with a ``correct`` column (1 where pred == truth)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if not (len(pred) == len(truth) == len(cloud)):
        raise ArgumentError("predictions, labels and cloud must be aligned")
    out = cloud.subset(np.arange(len(cloud)))
    out.extra["correct"] = (pred == truth).astype(np.float64)
    return out


def mined_pair_purity(pairs, truth1, truth2):
    """Fraction of valid mined negatives whose two points share a true class.

    This is the contamination rate (lower is better). Returns ``None`` when
    there are no valid negatives.
    """
    b1, b2 = pairs.valid_negatives()
    if len(b1) == 0:
        return None
    same = np.asarray(truth1)[b1] == np.asarray(truth2)[b2]
    return float(same.mean())


def format_metrics_csv(met, class_names=None):
    lines = ["class,precision,recall,f1"]
    for c in range(len(met.f1)):
        name = class_names[c] if class_names and c < len(class_names) else str(c)
        lines.append(f"{name},{met.precision[c]:.9g},{met.recall[c]:.9g},{met.f1[c]:.9g}")
    lines.append(f"OA,,,{met.oa:.9g}")
    lines.append(f"AvgF1,,,{met.avg_f1:.9g}")
    return "\n".join(lines) + "\n"
