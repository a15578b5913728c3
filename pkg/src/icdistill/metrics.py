"""Classification metrics, class-imbalance statistics and trend tests."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import stats

from .data import Dataset


class MetricError(ValueError):
    pass


def _labels(y) -> np.ndarray:
    return np.asarray(y, dtype=np.int64).reshape(-1)


def accuracy(y_true, y_pred) -> float:
    t, p = _labels(y_true), _labels(y_pred)
    if t.shape != p.shape:
        raise MetricError(f"length mismatch: {t.size} vs {p.size}")
    if t.size == 0:
        raise MetricError("empty input")
    return float(np.mean(t == p))


def per_class_f1(y_true, y_pred, num_classes: int) -> np.ndarray:
    t, p = _labels(y_true), _labels(y_pred)
    scores = np.zeros(num_classes)
    for k in range(num_classes):
        tp = np.sum((t == k) & (p == k))
        fp = np.sum((t != k) & (p == k))
        fn = np.sum((t == k) & (p != k))
        denom = 2 * tp + fp + fn
        scores[k] = 2 * tp / denom if denom else 0.0
    return scores


def f1(y_true, y_pred, num_classes: Optional[int] = None) -> float:
    """Binary F1 of class 1 when there are two classes, else support-weighted mean F1."""
    t, p = _labels(y_true), _labels(y_pred)
    if t.shape != p.shape:
        raise MetricError(f"length mismatch: {t.size} vs {p.size}")
    if t.size == 0:
        raise MetricError("empty input")
    C = num_classes or max(int(t.max()), int(p.max()), 1) + 1
    scores = per_class_f1(t, p, C)
    if C == 2:
        return float(scores[1])
    support = np.bincount(t, minlength=C)
    return float(np.dot(scores, support) / t.size)


def binary_auc(is_positive, scores) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    pos = np.asarray(is_positive, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    n1 = int(pos.sum())
    n0 = pos.size - n1
    if n1 == 0 or n0 == 0:
        raise MetricError("AUC undefined: only one class present in y_true")
    ranks = stats.rankdata(s)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def _check_proba(proba, n: int) -> np.ndarray:
    P = np.asarray(proba, dtype=np.float64)
    if P.ndim == 1:
        P = np.stack([1.0 - P, P], axis=1)
    if P.ndim != 2 or P.shape[0] != n:
        raise MetricError(f"probabilities of shape {P.shape} do not match {n} labels")
    if not np.allclose(P.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise MetricError("probability rows must sum to 1")
    return P


def per_class_auc(y_true, proba) -> np.ndarray:
    """One-vs-rest AUC per class; NaN for classes absent from ``y_true``."""
    t = _labels(y_true)
    P = _check_proba(proba, t.size)
    out = np.full(P.shape[1], np.nan)
    for k in range(P.shape[1]):
        pos = t == k
        if pos.any() and not pos.all():
            out[k] = binary_auc(pos, P[:, k])
    return out


def auc(y_true, proba) -> float:
    """Rank AUC for two classes, macro one-vs-rest average otherwise.

    ``proba`` is ``(n, C)``; a 1-D array is read as the class-1 probability.
    In the multiclass case, classes absent from ``y_true`` are left out of
    the average.
    """
    t = _labels(y_true)
    P = _check_proba(proba, t.size)
    if np.unique(t).size < 2:
        raise MetricError("AUC undefined: only one class present in y_true")
    if P.shape[1] == 2:
        return binary_auc(t == 1, P[:, 1])
    return float(np.nanmean(per_class_auc(t, P)))


@dataclass
class MetricReport:
    accuracy: float
    f1: float
    auc: float
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(y_true, proba) -> MetricReport:
    t = _labels(y_true)
    P = _check_proba(proba, t.size)
    C = P.shape[1]
    pred = np.argmax(P, axis=1)
    pc_auc = per_class_auc(t, P)
    return MetricReport(
        accuracy=accuracy(t, pred),
        f1=f1(t, pred, C),
        auc=auc(t, P),
        per_class={
            "support": np.bincount(t, minlength=C).tolist(),
            "f1": per_class_f1(t, pred, C).tolist(),
            "auc": [None if np.isnan(v) else float(v) for v in pc_auc],
        },
    )


def imbalance_ratio(data: Union[Dataset, np.ndarray]) -> float:
    """Majority-class count over minority-class count (classes with no rows are ignored)."""
    y = data.y if isinstance(data, Dataset) else _labels(data)
    counts = np.bincount(y)
    counts = counts[counts > 0]
    if counts.size < 2:
        raise MetricError("imbalance ratio needs at least two classes")
    return float(counts.max() / counts.min())


@dataclass
class TrendResult:
    slope: float
    intercept: float
    stderr: float
    p_value: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def trend_slope(x, y) -> TrendResult:
    """OLS of ``y`` on ``log10(x)`` with a two-sided t-test of zero slope."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise MetricError(f"length mismatch: {x.size} vs {y.size}")
    n = x.size
    if n < 3:
        raise MetricError("trend test needs at least 3 points")
    if (x <= 0).any():
        raise MetricError("x values must be positive")
    lx = np.log10(x)
    if np.ptp(lx) == 0:
        raise MetricError("x values are all equal")
    if np.ptp(y) == 0:
        return TrendResult(0.0, float(y[0]), 0.0, 1.0, n)
    xc = lx - lx.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * lx.mean())
    resid = y - (intercept + slope * lx)
    dof = n - 2
    s2 = float(resid @ resid) / dof
    se = float(np.sqrt(s2 / sxx))
    if se == 0.0:
        p = 0.0 if slope != 0.0 else 1.0
    else:
        p = float(2.0 * stats.t.sf(abs(slope / se), dof))
    return TrendResult(slope, intercept, se, p, n)
