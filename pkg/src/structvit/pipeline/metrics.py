"""Per-class ranking AUC and thresholded F1 with unweighted macro averages."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def binary_auc(scores, labels) -> float:
    """Mann-Whitney AUC: (wins + 0.5 * ties) / (positives * negatives).

    Raises ValueError when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks give ties half credit
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _columns(scores, labels, mask):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
        mask = None if mask is None else np.asarray(mask)[:, None]
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    m = np.ones(s.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    for c in range(s.shape[1]):
        keep = m[:, c]
        yield c, s[keep, c], y[keep, c]


def per_class_auc(scores, labels, mask=None) -> tuple[list[float | None], list[int]]:
    """AUC per column; columns lacking a positive or a negative are None and listed as skipped."""
    aucs: list[float | None] = []
    skipped = []
    for c, s, y in _columns(scores, labels, mask):
        if y.all() or not y.any():
            aucs.append(None)
            skipped.append(c)
        else:
            aucs.append(binary_auc(s, y))
    return aucs, skipped


def macro_auc(scores, labels, mask=None) -> float:
    aucs, _ = per_class_auc(scores, labels, mask)
    vals = [a for a in aucs if a is not None]
    if not vals:
        raise ValueError("no class has both positives and negatives")
    return float(np.mean(vals))


def f1(pred, labels) -> float:
    pred = np.asarray(pred).astype(bool)
    y = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def per_class_f1(scores, labels, threshold: float = 0.5, mask=None) -> list[float | None]:
    """F1 of ``score >= threshold``; None for classes with no actual positive."""
    out: list[float | None] = []
    for _, s, y in _columns(scores, labels, mask):
        out.append(f1(s >= threshold, y) if y.any() else None)
    return out


def macro_f1(scores, labels, threshold: float = 0.5, mask=None) -> float:
    vals = [v for v in per_class_f1(scores, labels, threshold, mask) if v is not None]
    return float(np.mean(vals)) if vals else 0.0
