import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from overlapdet.assignment import (CategoryGroupLayout, CostWeights, GroundTruth, Prediction,
                                   baseline_select, build_cost_matrix, category_hungarian,
                                   category_match, csm_select, hungarian, select_per_class,
                                   select_top)
from overlapdet.geometry import NormalizedBox, giou, l1_box_distance


def brute_force(cost):
    """Optimal total over every injection of the shorter side into the longer."""
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    t = cost if n <= m else cost.T
    best = np.inf
    for perm in itertools.permutations(range(t.shape[1]), t.shape[0]):
        best = min(best, sum(t[i, perm[i]] for i in range(t.shape[0])))
    return best


def box(cx, cy, w=0.2, h=0.2):
    return NormalizedBox(cx, cy, w, h)


def test_hungarian_examples():
    a = hungarian([[0, 1], [1, 0]])
    assert a.pairs == [(0, 0), (1, 1)] and a.total_cost == 0
    a = hungarian([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
    assert a.pairs == [(0, 1), (1, 0), (2, 2)] and a.total_cost == 5
    tall = np.array([[3.0, 1.0], [2.0, 2.0], [0.5, 4.0]])
    a = hungarian(tall)
    assert len(a.pairs) == 2 and a.total_cost == brute_force(tall)
    with pytest.raises(ValueError):
        hungarian(np.zeros((0, 0)))


def test_hungarian_tie_break_lowest_indices():
    assert hungarian(np.ones((2, 2))).pairs == [(0, 0), (1, 1)]
    assert hungarian(np.zeros((3, 2))).pairs == [(0, 0), (1, 1)]


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hungarian_optimal_against_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 7, size=2)
    cost = rng.integers(0, 20, size=(n, m)).astype(float) if seed % 2 else rng.uniform(0, 1, (n, m))
    a = hungarian(cost)
    assert len(a.pairs) == min(n, m)
    assert a.total_cost == pytest.approx(brute_force(cost), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hungarian_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 6, size=2)
    cost = rng.uniform(size=(n, m))
    perm = rng.permutation(n)
    a, b = hungarian(cost), hungarian(cost[perm])
    assert b.total_cost == pytest.approx(a.total_cost, abs=1e-12)
    # row i of the permuted matrix is original row perm[i]
    mapped = sorted((int(perm[r]), c) for r, c in b.pairs)
    assert sum(cost[r, c] for r, c in mapped) == pytest.approx(a.total_cost, abs=1e-12)


def test_cost_matrix_terms():
    gt = [GroundTruth(box(0.5, 0.5), 1)]
    perfect = Prediction(box(0.5, 0.5), (0.0, 1.0))
    w = CostWeights(1.0, 1.0, 1.0)
    assert build_cost_matrix([perfect], gt, w)[0, 0] == pytest.approx(0.0, abs=1e-12)
    zero_score = Prediction(box(0.5, 0.5), (1.0, 0.0))
    assert build_cost_matrix([zero_score], gt, CostWeights(1.0, 0.0, 0.0))[0, 0] == 1.0

    preds = [Prediction(box(0.3, 0.3), (0.8, 0.1)), Prediction(box(0.6, 0.5, 0.3, 0.2), (0.2, 0.7))]
    gts = [GroundTruth(box(0.35, 0.3), 0), GroundTruth(box(0.6, 0.6, 0.2, 0.3), 1)]
    w = CostWeights()
    c = build_cost_matrix(preds, gts, w)
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            want = (w.lambda_cls * (1 - p.scores[g.class_id]) + w.lambda_l1 * l1_box_distance(p.box, g.box)
                    + w.lambda_giou * (1 - giou(p.box, g.box)))
            assert c[i, j] == pytest.approx(want, abs=1e-12)
    assert np.all(c >= 0) and np.all(np.isfinite(c))
    with pytest.raises(ValueError):
        build_cost_matrix(preds, [GroundTruth(box(0.5, 0.5), 2)])


def test_cost_weights_validation_and_focal():
    with pytest.raises(ValueError):
        CostWeights(-1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        CostWeights(0.0, 0.0, 0.0)
    preds = [Prediction(box(0.5, 0.5), (0.9,)), Prediction(box(0.5, 0.5), (0.1,))]
    gts = [GroundTruth(box(0.5, 0.5), 0)]
    focal = build_cost_matrix(preds, gts, CostWeights(1.0, 0.0, 0.0, focal=True))
    assert focal[0, 0] < focal[1, 0]


def test_baseline_select_examples():
    preds = [Prediction(box(0.5, 0.5), (s, 0.0), i) for i, s in enumerate([0.9, 0.3, 0.7])]
    assert [p.source_index for p in baseline_select(preds, 2)] == [0, 2]
    assert [p.source_index for p in baseline_select(preds, 3)] == [0, 2, 1]
    with pytest.raises(ValueError):
        baseline_select(preds, 4)


def test_baseline_select_matches_sort_oracle():
    rng = np.random.default_rng(1)
    scores = rng.uniform(size=(50, 3))
    preds = [Prediction(box(0.5, 0.5), tuple(s), i) for i, s in enumerate(scores)]
    oracle = sorted(range(50), key=lambda i: (-scores[i].max(), i))[:10]
    assert [p.source_index for p in baseline_select(preds, 10)] == oracle
    assert select_top(scores.max(axis=1), 10).tolist() == oracle


def test_csm_select_example_with_duplicates():
    s = [[0.9, 0.1], [0.8, 0.7], [0.3, 0.6], [0.5, 0.2], [0.1, 0.95]]
    preds = [Prediction(box(0.5, 0.5), tuple(x), i) for i, x in enumerate(s)]
    chosen, layout = csm_select(preds, 4, 2)
    assert [p.source_index for p in chosen] == [0, 1, 4, 1]
    assert layout.groups().tolist() == [0, 0, 1, 1]
    assert select_per_class(np.array(s), 4, 2).tolist() == [0, 1, 4, 1]


def test_csm_select_degenerate_cases():
    rng = np.random.default_rng(2)
    scores = rng.uniform(size=(12, 1))
    preds = [Prediction(box(0.5, 0.5), tuple(x), i) for i, x in enumerate(scores)]
    chosen, _ = csm_select(preds, 5, 1)
    assert [p.source_index for p in chosen] == [p.source_index for p in baseline_select(preds, 5)]
    flat = [Prediction(box(0.5, 0.5), (0.5, 0.5, 0.5), i) for i in range(8)]
    chosen, _ = csm_select(flat, 6, 3)
    assert [p.source_index for p in chosen] == [0, 1, 0, 1, 0, 1]
    with pytest.raises(ValueError):
        csm_select(flat, 7, 3)
    with pytest.raises(ValueError):
        csm_select(flat[:1], 6, 3)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 4))
def test_csm_select_properties(seed, k, per):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.uniform(size=(per + int(rng.integers(0, 8)), k)), 1)
    idx = select_per_class(scores, k * per, k)
    assert idx.size == k * per
    for c in range(k):
        group = idx[c * per:(c + 1) * per]
        others = np.setdiff1d(np.arange(scores.shape[0]), group)
        if others.size:
            assert scores[group, c].min() >= scores[others, c].max()


def test_layout_rejects_indivisible():
    with pytest.raises(ValueError):
        CategoryGroupLayout(4, 6)
    layout = CategoryGroupLayout(3, 6)
    assert layout.group_of(3) == 1 and list(layout.members_of(2)) == [4, 5]


def _preds_for(layout, rng):
    return [Prediction(box(*rng.uniform(0.3, 0.7, 2)), tuple(rng.uniform(size=layout.num_classes)), i)
            for i in range(layout.num_queries)]


def test_category_hungarian_partition():
    rng = np.random.default_rng(3)
    layout = CategoryGroupLayout(2, 4)
    preds = _preds_for(layout, rng)
    gts = [GroundTruth(box(0.5, 0.5), 1)]
    a = category_hungarian(preds, layout, gts)
    assert len(a.pairs) == 1 and layout.group_of(a.pairs[0][0]) == 1
    assert category_hungarian(preds, layout, []).pairs == []


def test_category_hungarian_matches_per_class_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(200):
        layout = CategoryGroupLayout(2, 4)
        preds = _preds_for(layout, rng)
        gts = [GroundTruth(box(*rng.uniform(0.3, 0.7, 2)), c) for c in (0, 0, 1, 1)]
        a = category_hungarian(preds, layout, gts)
        cost = build_cost_matrix(preds, gts)
        want = 0.0
        for c in (0, 1):
            rows = list(layout.members_of(c))
            cols = [j for j, g in enumerate(gts) if g.class_id == c]
            want += brute_force(cost[np.ix_(rows, cols)])
        assert a.total_cost == pytest.approx(want, abs=1e-12)
        assert all(layout.group_of(p) == gts[g].class_id for p, g in a.pairs)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_category_match_never_crosses_classes(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    per = int(rng.integers(1, 3))
    groups = np.repeat(np.arange(k), per)
    gt_classes = rng.integers(0, k, size=int(rng.integers(0, 6)))
    cost = rng.uniform(size=(k * per, max(1, gt_classes.size)))[:, :gt_classes.size]
    rows, cols, unmatched = category_match(cost, groups, gt_classes)
    assert all(groups[r] == gt_classes[c] for r, c in zip(rows, cols))
    expected_unmatched = sum(max(0, int(np.sum(gt_classes == c)) - per) for c in range(k))
    assert unmatched == expected_unmatched


def test_excess_ground_truths_warn(caplog):
    rng = np.random.default_rng(5)
    layout = CategoryGroupLayout(2, 2)
    preds = _preds_for(layout, rng)
    gts = [GroundTruth(box(0.4, 0.4), 0), GroundTruth(box(0.6, 0.6), 0)]
    with caplog.at_level(logging.WARNING):
        a = category_hungarian(preds, layout, gts)
    assert a.unmatched_gts == 1 and len(a.pairs) == 1
    assert "unmatched" in caplog.text
