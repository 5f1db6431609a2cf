"""Detection and localization metrics: AUROC, AP, F1-max and AUPRO."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import MetricError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _prep(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise MetricError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney U statistic normalized to [0, 1], ties counted as half."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) when predicting positive for score >= each distinct score, high to low."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    return tp[last].astype(np.float64), fp[last].astype(np.float64)


def average_precision(scores, labels) -> float:
    """Step-interpolated area under the precision-recall curve."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def f1_max(scores, labels) -> float:
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("F1-max needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    f1 = 2.0 * tp / (tp + fp + n_pos)
    return float(f1.max())


def _label_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)


def pro_curve(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Exact (FPR, PRO) points at every distinct score threshold, starting from (0, 0).

    PRO at a threshold is the mean over all connected ground-truth regions of
    the fraction of that region's pixels scoring at or above the threshold.
    """
    score_parts, neg_parts, weight_parts = [], [], []
    n_regions = 0
    region_weights = []
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        labels, n = _label_regions(mask)
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        region_weights.append((labels.ravel(), sizes, n_regions))
        n_regions += n
        score_parts.append(amap.ravel())
    if n_regions == 0:
        raise MetricError("AUPRO needs at least one anomalous region")
    for lab, sizes, _ in region_weights:
        w = np.zeros(lab.size)
        inside = lab > 0
        w[inside] = 1.0 / (sizes[lab[inside]] * n_regions)
        weight_parts.append(w)
        neg_parts.append(~inside)
    s = np.concatenate(score_parts)
    if not np.all(np.isfinite(s)):
        raise MetricError("anomaly maps must be finite")
    w = np.concatenate(weight_parts)
    neg = np.concatenate(neg_parts)
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise MetricError("AUPRO needs at least one normal pixel")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    pro = np.cumsum(w[order])
    fpr = np.cumsum(neg[order]) / n_neg
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    return np.r_[0.0, fpr[last]], np.r_[0.0, pro[last]]


def integrate_limited(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoidal area under the piecewise-linear curve (x ascending) on [0, limit]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = x <= limit
    xs, ys = x[keep], y[keep]
    if xs[-1] < limit:
        j = int(np.searchsorted(x, limit, side="right"))
        if j < x.size:
            x0, x1, y0, y1 = x[j - 1], x[j], y[j - 1], y[j]
            y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            xs, ys = np.r_[xs, limit], np.r_[ys, y_lim]
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))


def aupro(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Normalized area under the PRO-vs-FPR curve on ``[0, fpr_limit]``."""
    if not 0.0 < fpr_limit <= 1.0:
        raise MetricError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    fpr, pro = pro_curve(maps, masks)
    return integrate_limited(fpr, pro, fpr_limit) / fpr_limit
