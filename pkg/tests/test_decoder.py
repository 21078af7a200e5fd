import numpy as np
import pytest

from overlapdet import numeric as nm
from overlapdet.harness.decoder import (CategoryQueryLibrary, LayerParams, decoder_layer,
                                        encoder_proposals, positional_tags, sample_box_features,
                                        sample_points)
from overlapdet.harness.scene import SceneObject, SceneSpec, class_signatures, generate_scene

DIM, CH, K = 4, 2, 2


def features(seed=0):
    return np.random.default_rng(seed).normal(size=(6, 6, CH))


def test_zero_params_pass_queries_through():
    q = np.random.default_rng(1).normal(size=(3, DIM))
    refs = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.6, 0.1, 0.4], [0.9, 0.1, 0.3, 0.3]])
    q_new, off, logits = decoder_layer(q, refs, features(), LayerParams.zeros(DIM, CH, K))
    assert np.array_equal(q_new, q)
    assert np.array_equal(off, np.zeros((3, 4))) and np.array_equal(logits, np.zeros((3, K)))


def test_width_mismatch_raises():
    with pytest.raises(ValueError):
        decoder_layer(np.zeros((1, DIM + 1)), np.full((1, 4), 0.5), features(),
                      LayerParams.zeros(DIM, CH, K))


def test_reference_is_not_differentiated():
    rng = np.random.default_rng(2)
    lp = LayerParams.random(rng, DIM, CH, K)
    tape = nm.Tape()
    r = tape.variable(np.array([[0.4, 0.5, 0.2, 0.3]]))
    q = tape.variable(rng.normal(size=(1, DIM)))
    _, off, logits = decoder_layer(q, r, features(), lp)
    g = tape.backward(nm.total(off) + nm.total(logits))
    assert np.array_equal(g[r], np.zeros((1, 4)))
    assert np.any(g[q] != 0)


def test_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    lp = LayerParams.random(rng, DIM, CH, K)
    shapes = [a.shape for a in lp.arrays()]
    sizes = [int(np.prod(s)) for s in shapes]
    x = np.concatenate([a.ravel() for a in lp.arrays()])
    q = rng.normal(size=(1, DIM))
    refs = np.array([[0.45, 0.55, 0.3, 0.2]])
    feats = features(4)
    coeff_o, coeff_c = rng.normal(size=(1, 4)), rng.normal(size=(1, K))

    def f(v):
        parts, start = [], 0
        for shape, size in zip(shapes, sizes):
            parts.append(v[np.arange(start, start + size).reshape(shape)])
            start += size
        q_new, off, logits = decoder_layer(q, refs, feats, LayerParams(*parts))
        return nm.total(off * coeff_o) + nm.total(nm.sigmoid(logits) * coeff_c) + nm.total(q_new * q_new)
    ok, a, n = nm.check_gradient(f, x)
    assert ok, np.max(np.abs(a - n))


def test_sample_points_and_features():
    refs = np.array([[0.5, 0.5, 0.4, 0.2], [0.05, 0.95, 0.3, 0.3]])
    xs, ys = sample_points(refs)
    assert xs.shape == (2, 5) and np.all((xs >= 0) & (xs <= 1)) and np.all((ys >= 0) & (ys <= 1))
    assert np.allclose(xs[0], [0.5, 0.3, 0.7, 0.3, 0.7]) and np.allclose(ys[0], [0.5, 0.4, 0.4, 0.6, 0.6])
    assert sample_box_features(features(), refs).shape == (2, 5 * CH)


def test_proposals_score_the_object_class():
    obj = SceneObject(1, (0.5625, 0.4375), (0.3, 0.3))
    scene = generate_scene(SceneSpec(3, (obj,), clutter=0))
    boxes, scores = encoder_proposals(scene)
    assert boxes.shape == (64, 4) and scores.shape == (64, 3)
    assert np.all((scores >= 0) & (scores <= 1))
    best = int(np.argmax(scores[:, 1]))
    assert np.allclose(boxes[best, :2], obj.center)
    assert scores[best, 1] > scores[best, 0] and scores[best, 1] > scores[best, 2]


def test_query_library_groups_follow_prototypes():
    protos = np.random.default_rng(5).normal(size=(3, DIM))
    lib = CategoryQueryLibrary(protos, positional_tags(2, DIM))
    q = lib.expand()
    assert q.shape == (6, DIM) and lib.per_group == 2
    for n in range(6):
        assert np.allclose(q[n], protos[n // 2] + lib.tags[n % 2])
    shifted = CategoryQueryLibrary(protos + np.eye(3, DIM), lib.tags).expand()
    assert np.allclose(shifted - q, np.repeat(np.eye(3, DIM), 2, axis=0))
    assert not np.allclose(q[0], q[1])
    assert class_signatures(3, CH + 2).shape == (3, CH + 2)
