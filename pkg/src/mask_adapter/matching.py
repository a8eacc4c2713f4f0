"""Pairing ground-truth masks with predicted masks.

:func:`iou_matcher` keeps every pair above an IoU threshold (many-to-many);
:func:`hungarian_matcher` is the one-to-one baseline under cost ``1 - IoU``.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .masks import iou_matrix

DEFAULT_IOU_THRESHOLD = 0.7
_TIE_ATOL = 1e-12


@dataclass
class MatchSet:
    gt: np.ndarray
    pred: np.ndarray
    iou: np.ndarray

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=np.int64).reshape(-1)
        self.pred = np.asarray(self.pred, dtype=np.int64).reshape(-1)
        self.iou = np.asarray(self.iou, dtype=np.float64).reshape(-1)
        if not len(self.gt) == len(self.pred) == len(self.iou):
            raise ValueError("gt, pred and iou must have equal length")

    def __len__(self):
        return len(self.gt)

    @property
    def pairs(self):
        return [(int(g), int(p), float(v)) for g, p, v in zip(self.gt, self.pred, self.iou)]

    def subset(self, keep):
        keep = np.asarray(keep)
        return MatchSet(self.gt[keep], self.pred[keep], self.iou[keep])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gt_index", "pred_index", "iou"])
            for g, p, v in self.pairs:
                writer.writerow([g, p, repr(v)])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [int(r["gt_index"]) for r in rows],
            [int(r["pred_index"]) for r in rows],
            [float(r["iou"]) for r in rows],
        )

    @classmethod
    def empty(cls):
        return cls([], [], [])


def iou_matcher(gt, pred, threshold=DEFAULT_IOU_THRESHOLD):
    """All ``(i, j)`` with ``IoU(gt_i, pred_j) >= threshold``, in row-major order."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    ious = iou_matrix(gt, pred)
    gi, pj = np.nonzero(ious >= threshold)
    return MatchSet(gi, pj, ious[gi, pj])


def _optimal_cost(cost):
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def _lexicographic_assignment(cost):
    """Min-cost assignment of every row (rows <= cols), lexicographically smallest among optima."""
    n, m = cost.shape
    best = _optimal_cost(cost)
    rows_left = list(range(n))
    cols_left = list(range(m))
    fixed = 0.0
    out = []
    for i in range(n):
        rows_left.remove(i)
        for j in list(cols_left):
            rest = [c for c in cols_left if c != j]
            total = fixed + cost[i, j] + _optimal_cost(cost[np.ix_(rows_left, rest)])
            if total <= best + _TIE_ATOL * max(1.0, abs(best)):
                out.append(j)
                fixed += cost[i, j]
                cols_left = rest
                break
        else:  # pragma: no cover - a feasible column always exists
            raise RuntimeError("assignment refinement failed")
    return np.asarray(out, dtype=np.int64)


def hungarian_matcher(gt, pred):
    """One-to-one minimum ``1 - IoU`` assignment of size ``min(N, M)``.

    Among equally optimal assignments the lexicographically smallest pair
    list is returned (ordered by gt index, or by pred index when N > M).
    """
    ious = iou_matrix(gt, pred)
    n, m = ious.shape
    if n == 0 or m == 0:
        return MatchSet.empty()
    cost = 1.0 - ious
    if n <= m:
        rows = np.arange(n)
        cols = _lexicographic_assignment(cost)
    else:
        cols = np.arange(m)
        rows = _lexicographic_assignment(cost.T)
        order = np.argsort(rows)
        rows, cols = rows[order], cols[order]
    return MatchSet(rows, cols, ious[rows, cols])


def assignment_cost(ious, match):
    """Total ``1 - IoU`` of a one-to-one match set."""
    return float(np.sum(1.0 - np.asarray(ious)[match.gt, match.pred]))


MATCHERS = {"iou": iou_matcher, "hungarian": hungarian_matcher}
