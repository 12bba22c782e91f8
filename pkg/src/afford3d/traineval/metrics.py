"""mIoU, AUC, SIM and MAE on per-point affordance scores.

Ground truth is binarised at ``> 0`` for mIoU and AUC; SIM and MAE use the
continuous maps. AUC and SIM return ``None`` when undefined for a sample.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

MIOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def _pair(pred, gt, name):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"{name}: prediction length {pred.size} != ground truth length {gt.size}")
    return pred, gt


def metric_auc(pred, gt) -> float | None:
    """ROC AUC from the Mann-Whitney rank statistic, tied scores get midranks."""
    pred, gt = _pair(pred, gt, "metric_auc")
    pos = gt > 0
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(pred, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metric_miou(pred, gt, thresholds=MIOU_THRESHOLDS) -> float:
    pred, gt = _pair(pred, gt, "metric_miou")
    g = gt > 0
    ious = []
    for t in thresholds:
        p = pred >= t
        union = np.count_nonzero(p | g)
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(np.count_nonzero(p & g) / union)
    # correctly rounded mean, so the result does not depend on summation order
    return math.fsum(ious) / len(ious)


def metric_sim(pred, gt) -> float | None:
    pred, gt = _pair(pred, gt, "metric_sim")
    sp, sg = pred.sum(), gt.sum()
    if sp <= 0 or sg <= 0:
        return None
    return float(np.minimum(pred / sp, gt / sg).sum())


def metric_mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt, "metric_mae")
    return float(np.abs(pred - gt).mean())
