"""Look-forward reference-box refinement: once, twice, and densely.

Every decoder layer ``l`` predicts a logit-space offset ``d[l]`` for the box it
received.  The box handed to the next layer is always the detached single-step
update ``sigmoid(logit(ref[l-1]) + d[l])``.  What differs between schemes is
the box the layer-``l`` loss sees:

======================  ==================================================
``lfo``                 ``sigmoid(u + d[l])``
``lft``                 ``sigmoid(u + d[l] + d[l+1])`` (second term dropped at ``l = L``)
``lfd-sum-*``           ``sigmoid(u + sum_{n=l..L} w_n d[n])``
``lfd-avg-*``           the same weighted sum divided by ``L - l + 1``
======================  ==================================================

with ``u = logit(ref[l-1])`` and weights ``w_n`` equal to 1 (equal),
``2^(n-L)`` (amplify) or ``2^-n`` (diminish).  Layers are 1-based throughout.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from overlapdet import numeric as nm
from overlapdet.geometry import BoxOffset, NormalizedBox, inverse_sigmoid


class Kind(enum.Enum):
    LFO = "lfo"
    LFT = "lft"
    LFD = "lfd"


class Aggregate(enum.Enum):
    SUM = "sum"
    AVERAGE = "avg"


class Weighting(enum.Enum):
    EQUAL = "equal"
    AMPLIFY = "amplify"
    DIMINISH = "diminish"


@dataclass(frozen=True)
class RefineScheme:
    kind: Kind
    aggregate: Aggregate | None = None
    weighting: Weighting | None = None

    def __post_init__(self):
        dense = self.kind is Kind.LFD
        if dense != (self.aggregate is not None) or dense != (self.weighting is not None):
            raise ValueError("aggregate and weighting are required for lfd and only for lfd")

    @property
    def name(self) -> str:
        if self.kind is Kind.LFD:
            return f"lfd-{self.aggregate.value}-{self.weighting.value}"
        return self.kind.value

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "RefineScheme":
        """Parse ``lfo``, ``lft``, ``lfd`` (= ``lfd-sum-equal``) or ``lfd-<sum|avg>-<weighting>``."""
        t = text.strip().lower()
        if t in ("lfo", "lft"):
            return cls(Kind(t))
        if t == "lfd":
            return cls(Kind.LFD, Aggregate.SUM, Weighting.EQUAL)
        parts = t.split("-")
        if len(parts) == 3 and parts[0] == "lfd":
            agg = {"sum": Aggregate.SUM, "avg": Aggregate.AVERAGE,
                   "average": Aggregate.AVERAGE}.get(parts[1])
            try:
                weighting = Weighting(parts[2])
            except ValueError:
                weighting = None
            if agg is not None and weighting is not None:
                return cls(Kind.LFD, agg, weighting)
        raise ValueError(f"unknown refinement scheme {text!r}")


LFO = RefineScheme(Kind.LFO)
LFT = RefineScheme(Kind.LFT)
LFD_SUM_EQUAL = RefineScheme(Kind.LFD, Aggregate.SUM, Weighting.EQUAL)
DENSE_SCHEMES = tuple(RefineScheme(Kind.LFD, a, w) for a in Aggregate for w in Weighting)
ALL_SCHEMES = (LFO, LFT) + DENSE_SCHEMES


def offset_weights(scheme: RefineScheme, layer: int, num_layers: int) -> dict[int, float]:
    """Coefficient of each offset ``d[n]`` inside the layer-``layer`` sum, before averaging."""
    if not 1 <= layer <= num_layers:
        raise ValueError(f"layer {layer} outside [1, {num_layers}]")
    if scheme.kind is Kind.LFO:
        return {layer: 1.0}
    if scheme.kind is Kind.LFT:
        return {n: 1.0 for n in (layer, layer + 1) if n <= num_layers}
    span = range(layer, num_layers + 1)
    if scheme.weighting is Weighting.EQUAL:
        return {n: 1.0 for n in span}
    if scheme.weighting is Weighting.AMPLIFY:
        return {n: 1.0 / 2.0 ** (num_layers - n) for n in span}
    return {n: 1.0 / 2.0 ** n for n in span}


def detach_reference(r):
    """Gradient-blocked copy of a reference box (NormalizedBox, array or tape value)."""
    if isinstance(r, NormalizedBox):
        return NormalizedBox(r.cx, r.cy, r.w, r.h)
    return nm.detach(r)


def forward_step(r_prev, delta):
    """``sigmoid(logit(r_prev) + delta)``; the inference-time chain."""
    if isinstance(r_prev, NormalizedBox):
        d = delta.as_array() if isinstance(delta, BoxOffset) else np.asarray(delta, dtype=np.float64)
        return NormalizedBox.from_array(nm.sigmoid(inverse_sigmoid(r_prev.as_array()) + d))
    return nm.sigmoid(inverse_sigmoid(r_prev) + delta)


def scheme_box(r_prev_detached, offsets: Sequence, layer: int, scheme: RefineScheme):
    """Loss-facing box of ``layer`` given the full offset list ``offsets[n-1] = d[n]``.

    ``len(offsets)`` is taken as the layer count, so passing a truncated list
    restricts the dense sum to its leading terms.
    """
    num_layers = len(offsets)
    weights = offset_weights(scheme, layer, num_layers)
    u = inverse_sigmoid(nm.value_of(r_prev_detached))
    acc = None
    for n, w in weights.items():
        term = offsets[n - 1] if w == 1.0 else offsets[n - 1] * w
        acc = term if acc is None else acc + term
    if scheme.kind is Kind.LFD and scheme.aggregate is Aggregate.AVERAGE:
        acc = acc / float(num_layers - layer + 1)
    return nm.sigmoid(u + acc)


@dataclass
class RefinementTrace:
    """Per-layer detached references, offsets, and loss-facing boxes.

    ``detached_refs[0]`` is the initial reference; ``offsets[l-1]`` and
    ``reported[l-1]`` belong to layer ``l``.
    """

    detached_refs: list = field(default_factory=list)
    offsets: list = field(default_factory=list)
    reported: list = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.offsets)

    @classmethod
    def start(cls, initial_ref) -> "RefinementTrace":
        return cls(detached_refs=[np.asarray(nm.value_of(initial_ref), dtype=np.float64)])

    def push(self, delta) -> np.ndarray:
        """Record the next layer's offset and extend the detached chain."""
        self.offsets.append(delta)
        nxt = forward_step(self.detached_refs[-1], nm.value_of(delta))
        self.detached_refs.append(np.asarray(nxt))
        return self.detached_refs[-1]

    def finish(self, scheme: RefineScheme) -> list:
        self.reported = [reported_box(self, layer, scheme) for layer in range(1, self.num_layers + 1)]
        return self.reported


def reported_box(trace: RefinementTrace, layer: int, scheme: RefineScheme):
    if not 1 <= layer <= trace.num_layers:
        raise ValueError(f"layer {layer} outside [1, {trace.num_layers}]")
    return scheme_box(trace.detached_refs[layer - 1], trace.offsets, layer, scheme)


def refine(initial_ref, offsets: Sequence, scheme: RefineScheme) -> RefinementTrace:
    trace = RefinementTrace.start(initial_ref)
    for d in offsets:
        trace.push(d)
    trace.finish(scheme)
    return trace


@dataclass(frozen=True)
class GradFlowMatrix:
    """``reach[l-1, n-1]`` is true iff the layer-``l`` loss depends on ``d[n]``."""

    reach: np.ndarray

    @property
    def num_layers(self) -> int:
        return self.reach.shape[0]

    def count(self) -> int:
        return int(self.reach.sum())

    def cells(self) -> set[tuple[int, int]]:
        return {(int(l) + 1, int(n) + 1) for l, n in zip(*np.nonzero(self.reach))}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer"] + [f"offset_{n}" for n in range(1, self.num_layers + 1)])
        for l in range(self.num_layers):
            writer.writerow([l + 1] + [int(v) for v in self.reach[l]])
        return buf.getvalue()

    def __eq__(self, other) -> bool:
        return isinstance(other, GradFlowMatrix) and np.array_equal(self.reach, other.reach)

    __hash__ = None


def gradient_flow(scheme: RefineScheme, num_layers: int) -> GradFlowMatrix:
    """Dependency pattern written out per scheme (not derived from :func:`offset_weights`)."""
    if num_layers < 1:
        raise ValueError("need at least one layer")
    idx = np.arange(num_layers)
    l, n = np.meshgrid(idx, idx, indexing="ij")
    if scheme.kind is Kind.LFO:
        reach = l == n
    elif scheme.kind is Kind.LFT:
        reach = (n == l) | (n == l + 1)
    else:
        reach = n >= l
    return GradFlowMatrix(reach)


def _layer_objective(scheme: RefineScheme, layer: int, ref: np.ndarray, coeff: np.ndarray):
    num_layers = coeff.shape[0]

    def f(flat):
        offsets = [flat[4 * i:4 * i + 4] for i in range(num_layers)]
        return nm.total(scheme_box(ref, offsets, layer, scheme) * coeff[layer - 1])
    return f


def offset_jacobians(scheme: RefineScheme, num_layers: int, rng: np.random.Generator,
                     h: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a random linear functional of each layer's loss-facing box.

    Returns ``(tape, finite_difference)``, each shaped ``(L, L, 4)``: entry
    ``[l-1, n-1]`` is the gradient of the layer-``l`` objective w.r.t. ``d[n]``.
    The evaluation point is random and interior (boxes away from 0 and 1).
    """
    ref = rng.uniform(0.2, 0.8, size=4)
    flat0 = rng.uniform(-0.5, 0.5, size=4 * num_layers)
    coeff = rng.uniform(0.5, 1.5, size=(num_layers, 4))
    tape_j = np.zeros((num_layers, num_layers, 4))
    fd_j = np.zeros((num_layers, num_layers, 4))
    for layer in range(1, num_layers + 1):
        f = _layer_objective(scheme, layer, ref, coeff)
        tape_j[layer - 1] = nm.tape_gradient(f, flat0).reshape(num_layers, 4)
        fd_j[layer - 1] = nm.finite_difference(f, flat0, h).reshape(num_layers, 4)
    return tape_j, fd_j


def empirical_gradient_flow(scheme: RefineScheme, num_layers: int,
                            rng: np.random.Generator | None = None, tol: float = 1e-10
                            ) -> tuple[GradFlowMatrix, GradFlowMatrix, bool]:
    """Reach matrices measured by the tape and by central differences.

    The third element reports whether the two gradient estimates agree entry by
    entry within ``max(1e-6, 1e-4 * |g|)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    tape_j, fd_j = offset_jacobians(scheme, num_layers, rng)
    tape_reach = GradFlowMatrix(np.any(np.abs(tape_j) > tol, axis=-1))
    fd_reach = GradFlowMatrix(np.any(np.abs(fd_j) > tol, axis=-1))
    return tape_reach, fd_reach, nm.gradients_agree(tape_j, fd_j)


def linearized_weights(scheme: RefineScheme, num_layers: int, layer: int,
                       ref: np.ndarray | None = None) -> np.ndarray:
    """Coefficient of each ``d[n]`` recovered by differentiating at zero offsets.

    ``d box / d d[n] = sigmoid'(u) * w_n`` there, so dividing the tape gradient
    by ``sigmoid'(u)`` returns the effective weight (averaging included).
    """
    ref = np.full(4, 0.5) if ref is None else np.asarray(ref, dtype=np.float64)
    u = inverse_sigmoid(ref)
    slope = float(nm.sigmoid(u[0]) * (1 - nm.sigmoid(u[0])))

    def f(flat):
        offsets = [flat[4 * i:4 * i + 4] for i in range(num_layers)]
        return scheme_box(ref, offsets, layer, scheme)[0]

    grad = nm.tape_gradient(f, np.zeros(4 * num_layers)).reshape(num_layers, 4)
    return grad[:, 0] / slope
