"""Brute-force reference implementations for the detection metrics."""
import numpy as np


def auroc_pairs(ind, ood):
    wins = sum((o > i) + 0.5 * (o == i) for o in ood for i in ind)
    return wins / (len(ind) * len(ood))


def aupr_thresholds(ind, ood):
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(ind) | set(ood), reverse=True):
        tp = sum(o >= t for o in ood)
        fp = sum(i >= t for i in ind)
        recall = tp / len(ood)
        ap += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return ap


def fpr95_scan(ind, ood):
    # largest threshold that still flags at least 95% of OOD scores (integer test avoids rounding)
    best = None
    for t in sorted(set(ind) | set(ood)):
        if sum(o >= t for o in ood) * 100 >= 95 * len(ood):
            best = t
    return float(np.mean(np.asarray(ind) >= best))
