"""A tiny refinement decoder: fixed proposals, learned queries, L dense layers.

The encoder is not trained.  Its proposals are anchor boxes on a regular grid
scored by projecting the feature at each anchor center onto the class
signatures.  Each decoder layer samples the feature grid at the center and
four corners of its (detached) reference box in place of deformable
attention, then updates the query and predicts a logit-space box offset and
class logits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from overlapdet import kernels
from overlapdet import numeric as nm
from overlapdet.harness.scene import Scene, class_signatures

SAMPLE_POINTS = 5


def encoder_proposals(scene: Scene, grid: int = 8, anchor_size: float = 0.25,
                      sharpness: float = 6.0, bias: float = 0.35) -> tuple[np.ndarray, np.ndarray]:
    """Anchor boxes ``(P, 4)`` and per-class confidences ``(P, K)`` in [0, 1]."""
    k = scene.spec.num_classes
    centers = (np.arange(grid) + 0.5) / grid
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    boxes = np.stack([cx.ravel(), cy.ravel(),
                      np.full(grid * grid, anchor_size), np.full(grid * grid, anchor_size)], axis=1)
    feats = kernels.bilinear_sample(scene.features, boxes[:, 0], boxes[:, 1])
    proj = feats @ class_signatures(k, scene.spec.channels).T
    scores = nm.sigmoid(sharpness * (proj - bias))
    return boxes, scores


def sample_points(refs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center and four corners of each box, ``(N, 5)`` x and y arrays."""
    cx, cy, w, h = refs[:, 0], refs[:, 1], refs[:, 2], refs[:, 3]
    xs = np.stack([cx, cx - w / 2, cx + w / 2, cx - w / 2, cx + w / 2], axis=1)
    ys = np.stack([cy, cy - h / 2, cy - h / 2, cy + h / 2, cy + h / 2], axis=1)
    return np.clip(xs, 0.0, 1.0), np.clip(ys, 0.0, 1.0)


def sample_box_features(features: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """``(N, 5*C)`` concatenated samples for each reference box."""
    xs, ys = sample_points(refs)
    s = kernels.bilinear_sample(features, xs.ravel(), ys.ravel())
    return s.reshape(refs.shape[0], -1)


@dataclass
class LayerParams:
    """Dense maps of one layer; the last row of each matrix is a bias.

    ``query``:  [q, sampled, ref, 1] -> residual query update  ``(D+5C+4+1, D)``
    ``offset``: [q_new, sampled, 1]  -> logit-space box offset ``(D+5C+1, 4)``
    ``cls``:    [q_new, sampled, 1]  -> class logits           ``(D+5C+1, K)``
    """

    query: object
    offset: object
    cls: object

    def arrays(self) -> tuple:
        return self.query, self.offset, self.cls

    @classmethod
    def zeros(cls, dim: int, channels: int, num_classes: int) -> "LayerParams":
        s = SAMPLE_POINTS * channels
        return cls(np.zeros((dim + s + 5, dim)), np.zeros((dim + s + 1, 4)),
                   np.zeros((dim + s + 1, num_classes)))

    @classmethod
    def random(cls, rng: np.random.Generator, dim: int, channels: int, num_classes: int,
               scale: float = 1.0) -> "LayerParams":
        s = SAMPLE_POINTS * channels
        fin = dim + s + 5
        fout = dim + s + 1
        q = rng.normal(scale=scale / np.sqrt(fin), size=(fin, dim))
        o = rng.normal(scale=0.1 * scale / np.sqrt(fout), size=(fout, 4))
        c = rng.normal(scale=scale / np.sqrt(fout), size=(fout, num_classes))
        c[-1] = -2.0  # start with low confidences
        return cls(q, o, c)


def positional_tags(count: int, dim: int, amplitude: float = 0.5) -> np.ndarray:
    """Fixed sinusoidal tags that make copies of one prototype distinct."""
    pos = np.arange(count)[:, None] + 1.0
    freq = 1.0 / (100.0 ** (2 * (np.arange(dim) // 2) / dim))
    ang = pos * freq[None, :]
    tags = np.where(np.arange(dim) % 2 == 0, np.sin(ang), np.cos(ang))
    return amplitude * tags


@dataclass
class CategoryQueryLibrary:
    """One prototype per class, expanded into ``N/K`` tagged queries each."""

    prototypes: object  # (K, D)
    tags: np.ndarray  # (N_k, D)

    @property
    def per_group(self) -> int:
        return self.tags.shape[0]

    def expand(self):
        k = self.prototypes.shape[0]
        groups = np.repeat(np.arange(k), self.per_group)
        return self.prototypes[groups] + np.tile(self.tags, (k, 1))


def decoder_layer(q_prev, r_prev_detached: np.ndarray, features: np.ndarray, params: LayerParams):
    """One refinement step for a stack of queries.

    ``q_prev`` is ``(N, D)`` (array or tape value); ``r_prev_detached`` is a
    plain ``(N, 4)`` array, so nothing downstream can differentiate through
    it.  Returns ``(q_new, offset, class_logits)``.
    """
    refs = np.asarray(nm.value_of(r_prev_detached), dtype=np.float64)
    n = refs.shape[0]
    dim = q_prev.shape[1]
    sampled = sample_box_features(features, refs)
    ones = np.ones((n, 1))
    if params.query.shape[0] != dim + sampled.shape[1] + 5:
        raise ValueError("query map does not match query width and feature channels")
    z = nm.concat([q_prev, sampled, refs, ones], axis=1)
    q_new = q_prev + nm.tanh(nm.matmul(z, params.query))
    z2 = nm.concat([q_new, sampled, ones], axis=1)
    return q_new, nm.matmul(z2, params.offset), nm.matmul(z2, params.cls)
