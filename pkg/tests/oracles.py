"""Brute-force reference implementations used by the tests."""
import itertools

import numpy as np


def iou_sets(a, b):
    sa = {tuple(i) for i in np.argwhere(a)}
    sb = {tuple(i) for i in np.argwhere(b)}
    if not sa | sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def prf_sets(pred, gt):
    sp = {tuple(i) for i in np.argwhere(pred)}
    sg = {tuple(i) for i in np.argwhere(gt)}
    if not sp and not sg:
        return 1.0, 1.0, 1.0
    tp = len(sp & sg)
    p = tp / len(sp) if sp else 0.0
    r = tp / len(sg) if sg else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def roc_auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def pr_auc_thresholds(scores, labels):
    """Step integral over every distinct threshold, evaluated from scratch at each."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    area, prev_recall = 0.0, 0.0
    for th in sorted(set(scores.tolist()), reverse=True):
        sel = scores >= th
        tp = int(np.sum(sel & (labels == 1)))
        precision = tp / int(sel.sum())
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area
