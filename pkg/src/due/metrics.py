"""Explanation-overlap and prediction metrics.

Conventions for empty inputs: two empty masks have IoU 1 and precision,
recall and F1 of 1 (nothing to find, nothing found). Otherwise a zero
denominator gives 0.

PR-AUC is the step integral ``sum_k (R_k - R_{k-1}) * P_k`` over a
descending-score sweep in which tied scores enter together; no linear
interpolation between operating points.
"""
import numpy as np

from .errors import MetricUndefinedError, ValidationError

DEFAULT_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(10))


def binarize(saliency, threshold=0.5):
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {threshold}")
    values = getattr(saliency, "values", saliency)
    return (np.asarray(values) >= threshold).astype(np.uint8)


def _pair(a, b):
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b):
    a, b = _pair(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def precision_recall_f1(pred, gt):
    pred, gt = _pair(pred, gt)
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValidationError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    return s, y.astype(bool)


def roc_auc(scores, labels):
    """Mann-Whitney estimate via mid-ranks (ties count one half)."""
    s, y = _scores_labels(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("ROC-AUC needs both classes")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def pr_auc(scores, labels):
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefinedError("PR-AUC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # last index of every tie group
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def accuracy(probabilities, labels, threshold=0.5):
    s, y = _scores_labels(probabilities, labels)
    return float(np.mean((s >= threshold) == y))


def threshold_sweep(saliencies, masks, thresholds=DEFAULT_THRESHOLDS):
    """Mean IoU and F1 across samples at each threshold."""
    saliencies, masks = list(saliencies), list(masks)
    if not saliencies:
        raise ValidationError("threshold sweep needs at least one sample")
    if len(saliencies) != len(masks):
        raise ValidationError("saliency and mask lists differ in length")
    ious, f1s = [], []
    for th in thresholds:
        per_iou, per_f1 = [], []
        for s, m in zip(saliencies, masks):
            b = binarize(s, th)
            per_iou.append(iou(b, m))
            per_f1.append(precision_recall_f1(b, m)[2])
        ious.append(float(np.mean(per_iou)))
        f1s.append(float(np.mean(per_f1)))
    return {"thresholds": [float(t) for t in thresholds], "iou": ious, "f1": f1s}


def explanation_scores(saliency, mask, threshold=0.5):
    b = binarize(saliency, threshold)
    p, r, f = precision_recall_f1(b, mask)
    return {"iou": iou(b, mask), "precision": p, "recall": r, "f1": f}


def mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}
