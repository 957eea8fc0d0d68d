"""Threshold-free detection metrics with OOD as the positive class.

Scores are energies: higher means more OOD.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateProjectionError, UsageError


@dataclass
class ScoredSet:
    ind_scores: np.ndarray
    ood_scores: np.ndarray
    ind_correct: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        self.ind_scores = np.asarray(self.ind_scores, dtype=np.float64).ravel()
        self.ood_scores = np.asarray(self.ood_scores, dtype=np.float64).ravel()
        self.ind_correct = np.asarray(self.ind_correct, dtype=bool).ravel()
        if not (np.all(np.isfinite(self.ind_scores)) and np.all(np.isfinite(self.ood_scores))):
            raise UsageError("scores must be finite")
        if len(self.ind_correct) and len(self.ind_correct) != len(self.ind_scores):
            raise UsageError("ind_correct and ind_scores differ in length")

    def swapped(self) -> "ScoredSet":
        return ScoredSet(self.ood_scores, self.ind_scores)


def _require_both(ss: ScoredSet) -> None:
    if len(ss.ind_scores) == 0 or len(ss.ood_scores) == 0:
        raise UsageError("metric needs at least one InD and one OOD score")


def auroc(ss: ScoredSet) -> float:
    """P(OOD score > InD score) with ties counted 1/2 (Mann-Whitney U)."""
    _require_both(ss)
    n, m = len(ss.ind_scores), len(ss.ood_scores)
    ranks = rankdata(np.concatenate([ss.ood_scores, ss.ind_scores]))
    u = ranks[:m].sum() - m * (m + 1) / 2.0
    return float(u / (n * m))


def aupr(ss: ScoredSet) -> float:
    """Average precision: step interpolation over distinct descending thresholds.

    All scores equal to a threshold are classified together, so an InD tied
    with an OOD always lowers that OOD's precision.
    """
    _require_both(ss)
    scores = np.concatenate([ss.ood_scores, ss.ind_scores])
    is_pos = np.concatenate([np.ones(len(ss.ood_scores)), np.zeros(len(ss.ind_scores))])
    order = np.argsort(-scores, kind="stable")
    scores, is_pos = scores[order], is_pos[order]
    tp = np.cumsum(is_pos)
    fp = np.cumsum(1 - is_pos)
    last = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / len(ss.ood_scores)
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def _tpr_count(m: int) -> int:
    # ceil(0.95 * m) in exact integer arithmetic
    return (95 * m + 99) // 100


def fpr_at_95tpr(ss: ScoredSet) -> float:
    """Fraction of InD scores >= the largest cutoff keeping 95% of OODs."""
    _require_both(ss)
    r = _tpr_count(len(ss.ood_scores))
    t = np.sort(ss.ood_scores)[::-1][r - 1]
    return float(np.mean(ss.ind_scores >= t))


def ind_accuracy(ss: ScoredSet) -> float:
    if len(ss.ind_correct) == 0:
        raise UsageError("no InD correctness flags")
    return float(np.mean(ss.ind_correct))


def summarize(ss: ScoredSet) -> dict:
    out = {
        "auroc": auroc(ss),
        "aupr": aupr(ss),
        "fpr95": fpr_at_95tpr(ss),
        "n_ind": int(len(ss.ind_scores)),
        "n_ood": int(len(ss.ood_scores)),
    }
    out["ind_acc"] = ind_accuracy(ss) if len(ss.ind_correct) else None
    return out


def project_2d(reps: Mapping[str, np.ndarray]) -> list[tuple[float, float, str]]:
    """PCA onto the top two principal directions of the pooled, centred set.

    Each direction is signed so that its largest-magnitude loading is positive.
    """
    blocks, kinds = [], []
    for kind, x in reps.items():
        x = np.asarray(x, dtype=np.float64)
        if x.size == 0:
            continue
        x = x.reshape(len(x), -1)
        blocks.append(x)
        kinds.extend([kind] * len(x))
    if sum(len(b) for b in blocks) < 2:
        raise UsageError("projection needs at least two vectors")
    x = np.concatenate(blocks)
    xc = x - x.mean(axis=0)
    scale = max(np.abs(x).max(), 1.0)
    if np.abs(xc).max() <= 1e-12 * scale:
        raise DegenerateProjectionError("all vectors coincide; nothing to project")
    _, _, vt = np.linalg.svd(xc, full_matrices=True)
    dirs = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros_like(vt)])
    for k in range(dirs.shape[0]):
        j = int(np.argmax(np.abs(dirs[k])))
        if dirs[k, j] < 0:
            dirs[k] = -dirs[k]
    coords = xc @ dirs.T
    return [(float(a), float(b), kind) for (a, b), kind in zip(coords, kinds)]


def write_projection_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "kind"])
        for x, y, kind in rows:
            w.writerow([repr(x), repr(y), kind])
