"""Matching costs, top-N selection, and one-to-one label assignment.

Two strategies are provided:

* baseline: keep the ``N`` candidates with the highest confidence over any
  class, then match all of them against all ground truths;
* category-specific: keep the top ``N/K`` candidates per class column, give
  each class its own query group, and match group ``k`` only against
  ground truths of class ``k``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from overlapdet import kernels
from overlapdet.geometry import NormalizedBox, pairwise_l1

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prediction:
    box: NormalizedBox
    scores: tuple[float, ...]
    source_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if not self.scores:
            raise ValueError("scores must be non-empty")
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise ValueError("scores must lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class GroundTruth:
    box: NormalizedBox
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")


@dataclass(frozen=True)
class CostWeights:
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    focal: bool = False

    def __post_init__(self):
        ws = (self.lambda_cls, self.lambda_l1, self.lambda_giou)
        if any(w < 0 for w in ws):
            raise ValueError("cost weights must be non-negative")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one cost weight must be positive")


@dataclass
class Assignment:
    """Matched ``(prediction_index, ground_truth_index)`` pairs, sorted by prediction."""

    pairs: list[tuple[int, int]]
    total_cost: float
    unmatched_gts: int = 0

    def gt_of_prediction(self, num_predictions: int) -> np.ndarray:
        out = np.full(num_predictions, -1, dtype=np.int64)
        for p, g in self.pairs:
            out[p] = g
        return out


@dataclass(frozen=True)
class CategoryGroupLayout:
    num_classes: int
    num_queries: int
    _per_group: int = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_classes <= 0 or self.num_queries <= 0:
            raise ValueError("num_classes and num_queries must be positive")
        if self.num_queries % self.num_classes:
            raise ValueError(f"N={self.num_queries} is not divisible by K={self.num_classes}")
        object.__setattr__(self, "_per_group", self.num_queries // self.num_classes)

    @property
    def per_group(self) -> int:
        return self._per_group

    def group_of(self, query_index: int) -> int:
        if not 0 <= query_index < self.num_queries:
            raise IndexError(query_index)
        return query_index // self._per_group

    def members_of(self, k: int) -> range:
        if not 0 <= k < self.num_classes:
            raise IndexError(k)
        return range(k * self._per_group, (k + 1) * self._per_group)

    def groups(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_classes), self._per_group)


# -- array-level costs --------------------------------------------------------

def _focal_class_cost(p: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    p = np.clip(p, 1e-8, 1 - 1e-8)
    pos = alpha * (1 - p) ** gamma * -np.log(p)
    neg = (1 - alpha) * p ** gamma * -np.log(1 - p)
    return pos - neg


def cost_matrix(pred_boxes: np.ndarray, pred_scores: np.ndarray, gt_boxes: np.ndarray,
                gt_classes: np.ndarray, weights: CostWeights = CostWeights()) -> np.ndarray:
    """``(N_pred, N_gt)`` cost from classification, L1 and GIoU terms."""
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    gt_classes = np.asarray(gt_classes, dtype=np.intp)
    if gt_classes.size and gt_classes.max() >= pred_scores.shape[1]:
        raise ValueError("ground-truth class outside the predictions' score range")
    p = pred_scores[:, gt_classes]
    cls = _focal_class_cost(p) if weights.focal else 1.0 - p
    cost = weights.lambda_cls * cls
    if weights.lambda_l1:
        cost = cost + weights.lambda_l1 * pairwise_l1(pred_boxes, gt_boxes)
    if weights.lambda_giou:
        cost = cost + weights.lambda_giou * (1.0 - kernels.pairwise_giou(pred_boxes, gt_boxes))
    return cost


def match(cost: np.ndarray, solver=None) -> tuple[np.ndarray, np.ndarray]:
    """Rows and columns of a minimum-cost matching of size ``min(n, m)``."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError("cost matrix must be a non-empty 2-d array")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix entries must be finite")
    return (solver or kernels.linear_assignment)(cost)


def category_match(cost: np.ndarray, query_groups: np.ndarray, gt_classes: np.ndarray,
                   solver=None) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-class matching restricted to ``query_groups == k`` x ``gt_classes == k``.

    Returns ``(rows, cols, unmatched)`` with rows sorted; ``unmatched`` counts
    ground truths left over because their class had fewer queries than objects.
    """
    query_groups = np.asarray(query_groups)
    gt_classes = np.asarray(gt_classes)
    rows_out: list[np.ndarray] = []
    cols_out: list[np.ndarray] = []
    unmatched = 0
    for k in np.unique(gt_classes):
        q_idx = np.flatnonzero(query_groups == k)
        g_idx = np.flatnonzero(gt_classes == k)
        if q_idx.size == 0:
            unmatched += g_idx.size
            continue
        r, c = match(cost[np.ix_(q_idx, g_idx)], solver)
        rows_out.append(q_idx[r])
        cols_out.append(g_idx[c])
        unmatched += g_idx.size - len(c)
    if not rows_out:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty, unmatched
    rows = np.concatenate(rows_out)
    cols = np.concatenate(cols_out)
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order], unmatched


def select_top(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` largest scores, descending, ties by lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if n > scores.size:
        raise ValueError(f"cannot select {n} of {scores.size} candidates")
    return np.lexsort((np.arange(scores.size), -scores))[:n]


def select_per_class(scores: np.ndarray, n: int, k: int) -> np.ndarray:
    """Concatenated per-class top ``n/k`` candidate indices (group-major)."""
    scores = np.asarray(scores, dtype=np.float64)
    layout = CategoryGroupLayout(k, n)
    if scores.shape[1] != k:
        raise ValueError(f"scores have {scores.shape[1]} classes, expected {k}")
    if scores.shape[0] < layout.per_group:
        raise ValueError(f"only {scores.shape[0]} candidates for {layout.per_group} per class")
    return np.concatenate([select_top(scores[:, c], layout.per_group) for c in range(k)])


# -- object-level API ---------------------------------------------------------

def _stack(preds: Sequence[Prediction], gts: Sequence[GroundTruth]):
    if not preds or not gts:
        raise ValueError("predictions and ground truths must be non-empty")
    k = preds[0].num_classes
    if any(p.num_classes != k for p in preds):
        raise ValueError("predictions disagree on the number of classes")
    if any(g.class_id >= k for g in gts):
        raise ValueError(f"ground-truth class outside [0, {k})")
    pb = np.stack([p.box.as_array() for p in preds])
    ps = np.array([p.scores for p in preds])
    gb = np.stack([g.box.as_array() for g in gts])
    gc = np.array([g.class_id for g in gts], dtype=np.intp)
    return pb, ps, gb, gc


def build_cost_matrix(preds: Sequence[Prediction], gts: Sequence[GroundTruth],
                      w: CostWeights = CostWeights()) -> np.ndarray:
    pb, ps, gb, gc = _stack(preds, gts)
    return cost_matrix(pb, ps, gb, gc, w)


def hungarian(cost) -> Assignment:
    """Minimum-total-cost one-to-one matching of a (possibly rectangular) matrix.

    >>> hungarian([[4, 1, 3], [2, 0, 5], [3, 2, 2]]).pairs
    [(0, 1), (1, 0), (2, 2)]
    """
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = match(cost)
    return Assignment(list(zip(rows.tolist(), cols.tolist())),
                      float(cost[rows, cols].sum()))


def baseline_select(preds: Sequence[Prediction], n: int) -> list[Prediction]:
    if n > len(preds):
        raise ValueError(f"cannot select {n} of {len(preds)} predictions")
    order = sorted(range(len(preds)), key=lambda i: (-max(preds[i].scores), preds[i].source_index))
    return [preds[i] for i in order[:n]]


def csm_select(preds: Sequence[Prediction], n: int, k: int) -> tuple[list[Prediction], CategoryGroupLayout]:
    """Top ``n/k`` predictions per class column; a candidate may land in several groups."""
    layout = CategoryGroupLayout(k, n)
    if len(preds) < layout.per_group:
        raise ValueError(f"only {len(preds)} candidates for {layout.per_group} per class")
    if any(p.num_classes != k for p in preds):
        raise ValueError("predictions disagree with K")
    out: list[Prediction] = []
    for c in range(k):
        order = sorted(range(len(preds)), key=lambda i: (-preds[i].scores[c], preds[i].source_index))
        out.extend(preds[i] for i in order[:layout.per_group])
    return out, layout


def category_hungarian(preds: Sequence[Prediction], layout: CategoryGroupLayout,
                       gts: Sequence[GroundTruth], w: CostWeights = CostWeights()) -> Assignment:
    if len(preds) != layout.num_queries:
        raise ValueError("layout does not match the number of predictions")
    if not gts:
        return Assignment([], 0.0)
    cost = build_cost_matrix(preds, gts, w)
    gc = np.array([g.class_id for g in gts])
    rows, cols, unmatched = category_match(cost, layout.groups(), gc)
    if unmatched:
        log.warning("%d ground truths left unmatched: more objects than queries in their class",
                    unmatched)
    return Assignment(list(zip(rows.tolist(), cols.tolist())),
                      float(cost[rows, cols].sum()) if rows.size else 0.0, unmatched)
