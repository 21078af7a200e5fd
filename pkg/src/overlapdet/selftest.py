"""Built-in consistency suites run by ``overlapdet selftest``.

Each suite returns a :class:`SuiteResult`; a failing suite names the first
property that broke.  The Hungarian suite looks the solver up on the
``assignment`` module at call time so a replaced solver is what gets tested.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from overlapdet import assignment
from overlapdet import numeric as nm
from overlapdet.geometry import paired_giou
from overlapdet.metrics import AssignmentRecord, fcs, fis, fos, is_metric
from overlapdet.refinement import (ALL_SCHEMES, DENSE_SCHEMES, LFD_SUM_EQUAL, LFO, LFT, RefineScheme,
                                   empirical_gradient_flow, gradient_flow, scheme_box)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


class PropertyFailure(AssertionError):
    pass


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise PropertyFailure(message)


def brute_force_cost(cost: np.ndarray) -> float:
    """Optimal total by enumerating every injective row-to-column map, summed in row order."""
    n, m = cost.shape
    if n > m:
        cost = cost.T
        n, m = m, n
    best = np.inf
    for perm in itertools.permutations(range(m), n):
        best = min(best, float(sum(cost[i, perm[i]] for i in range(n))))
    return best


def _solver_cost(cost: np.ndarray) -> float:
    pairs = list(assignment.hungarian(cost).pairs)
    rows = [p[0] for p in pairs]
    cols = [p[1] for p in pairs]
    if len(set(rows)) != len(rows) or len(set(cols)) != len(cols) or len(pairs) != min(cost.shape):
        return np.nan
    if cost.shape[0] > cost.shape[1]:
        # same summation order as the enumeration of the transpose
        return float(sum(cost.T[c, r] for c, r in sorted((c, r) for r, c in pairs)))
    return float(sum(cost[r, c] for r, c in sorted(pairs)))


def hungarian_optimality(trials: int = 1000, max_size: int = 6, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    for t in range(trials):
        n, m = rng.integers(1, max_size + 1, size=2)
        if t % 2:
            cost = rng.integers(0, 10, size=(n, m)).astype(np.float64)
        else:
            cost = rng.uniform(-5, 5, size=(n, m))
        got, want = _solver_cost(cost), brute_force_cost(cost)
        _require(got == want, f"matrix {t} ({n}x{m}): solver total {got!r} vs enumeration {want!r}")
    return f"{trials} matrices up to {max_size}x{max_size}"


def _gradient_cases() -> list[tuple[str, Callable, np.ndarray]]:
    rng = np.random.default_rng(1)
    w = rng.normal(size=(4, 3))
    other = rng.uniform(0.2, 0.8, size=(3, 4))
    other[:, 2:] = rng.uniform(0.2, 0.4, size=(3, 2))
    return [
        ("arith", lambda x: nm.total(x * x / (1.0 + x * x) - 3.0 * x), rng.normal(size=5)),
        ("sigmoid_logit", lambda x: nm.total(nm.logit(nm.sigmoid(x) * 0.5 + 0.25)), rng.normal(size=4)),
        ("tanh_exp_log", lambda x: nm.total(nm.tanh(x) * nm.exp(0.3 * x) + nm.log(1.5 + nm.tanh(x))),
         rng.normal(size=4)),
        ("softplus_abs", lambda x: nm.total(nm.softplus(x) + nm.absolute(x - 0.05)), rng.uniform(0.2, 1, 4)),
        ("matmul", lambda x: nm.total(nm.tanh(nm.matmul(x[np.arange(8).reshape(2, 4)], w))),
         rng.normal(size=8)),
        ("min_max", lambda x: nm.total(nm.minimum(x, 0.1) * nm.maximum(x, -0.2)),
         np.array([-0.7, 0.4, 0.9, -0.05])),
        ("concat_index", lambda x: nm.total(nm.concat([x[:2] * 2.0, nm.exp(x[2:])], axis=0)[1:]),
         rng.normal(size=5)),
        ("giou", lambda x: nm.total(1.0 - paired_giou(x[np.arange(12).reshape(3, 4)], other)),
         np.concatenate([other[i] + rng.uniform(-0.05, 0.05, 4) for i in range(3)])),
        ("refinement", lambda x: nm.total(scheme_box(np.array([0.4, 0.6, 0.3, 0.2]),
                                                     [x[0:4], x[4:8], x[8:12]], 1,
                                                     RefineScheme.parse("lfd-avg-amplify"))),
         rng.uniform(-0.5, 0.5, size=12)),
    ]


def gradient_check() -> str:
    cases = _gradient_cases()
    for name, f, x in cases:
        ok, analytic, numeric = nm.check_gradient(f, x)
        _require(ok, f"{name}: tape {analytic.tolist()} vs finite differences {numeric.tolist()}")
    for scheme in ALL_SCHEMES:
        for layers in (3, 6):
            tape_reach, fd_reach, agree = empirical_gradient_flow(scheme, layers)
            symbolic = gradient_flow(scheme, layers)
            _require(agree, f"{scheme.name} L={layers}: tape and finite differences disagree")
            _require(tape_reach == symbolic and fd_reach == symbolic,
                     f"{scheme.name} L={layers}: measured reach differs from the symbolic pattern")
    return f"{len(cases)} op graphs, reach for {len(ALL_SCHEMES)} schemes at L=3,6"


def _rec(v, t, epoch=0):
    return AssignmentRecord(epoch, 0, v, t)


def metric_oracles(trials: int = 1000, seed: int = 2) -> str:
    _require(fcs(_rec([0, -1, 2], [4, -1, 5]), _rec([0, -1, 2], [3, -1, 5])) == 1, "fcs hand example")
    a = _rec([0, 1, 2, -1], [0, 0, 0, -1], 0)
    b = _rec([1, 0, 2, -1], [0, 0, 0, -1], 1)
    _require(fos(b, a) == 2, "fos hand example")
    _require(fcs(b, a) == 0, "fcs on class-stable swap")
    _require(fis(b, a) == 0.25, "fis hand example")
    _require(fis(a, a) == 0.0, "fis of identical records")
    _require(is_metric(_rec([0, 1], [0, 0]), _rec([0, -1], [0, -1])) == 0.5, "IS hand example")
    rng = np.random.default_rng(seed)
    for t in range(trials):
        n = int(rng.integers(1, 9))
        gts = int(rng.integers(1, 5))
        classes = rng.integers(0, 3, size=gts)

        def draw():
            v = np.where(rng.random(n) < 0.3, -1, rng.integers(0, gts, size=n))
            return _rec(v.tolist(), np.where(v >= 0, classes[np.maximum(v, 0)], -1).tolist())

        r1, r2 = draw(), draw()
        f = fis(r1, r2)
        _require(0.0 <= f <= 1.0, f"pair {t}: fis {f} outside [0, 1]")
        _require(f == fis(r2, r1), f"pair {t}: fis not symmetric")
        _require(fis(r1, r1) == 0.0 and is_metric(r1, r1) == 0.0, f"pair {t}: nonzero on identical logs")
        _require(is_metric(r1, r2) >= fos(r1, r2) / n, f"pair {t}: IS below FOS/N")
    return f"hand examples and {trials} random pairs"


def refinement_identities(seed: int = 3) -> str:
    rng = np.random.default_rng(seed)
    ref = rng.uniform(0.1, 0.9, size=4)
    for layers in (1, 3, 6):
        zeros = [np.zeros(4)] * layers
        for scheme in ALL_SCHEMES:
            for layer in range(1, layers + 1):
                out = scheme_box(ref, zeros, layer, scheme)
                _require(np.allclose(out, ref, rtol=0, atol=1e-12),
                         f"{scheme.name}: zero offsets moved the box at layer {layer}")
    offsets = [rng.uniform(-1, 1, size=4) for _ in range(4)]
    for layer in range(1, 4):
        _require(np.array_equal(scheme_box(ref, offsets[:layer + 1], layer, LFD_SUM_EQUAL),
                                scheme_box(ref, offsets[:layer + 1], layer, LFT)),
                 f"two-term dense sum differs from look-forward-twice at layer {layer}")
    for layer in range(1, 5):
        _require(np.array_equal(scheme_box(ref, offsets[:layer], layer, LFD_SUM_EQUAL),
                                scheme_box(ref, offsets[:layer], layer, LFO)),
                 f"single-term dense sum differs from look-forward-once at layer {layer}")
    for scheme in DENSE_SCHEMES:
        if scheme.name in ("lfd-sum-equal", "lfd-avg-equal"):
            _require(np.array_equal(scheme_box(ref, offsets, 4, scheme), scheme_box(ref, offsets, 4, LFO)),
                     f"{scheme.name}: last layer differs from look-forward-once")
    mid = np.full(4, 0.5)
    worked = [(LFD_SUM_EQUAL, 0.66818777), (RefineScheme.parse("lfd-sum-diminish"), 0.54363816),
              (RefineScheme.parse("lfd-avg-diminish"), 0.51457920)]
    scalar = [np.full(4, 0.2), np.full(4, 0.1), np.full(4, 0.4)]
    for scheme, want in worked:
        got = float(scheme_box(mid, scalar, 1, scheme)[0])
        _require(abs(got - want) < 1e-5, f"{scheme.name} worked example gave {got}, expected {want}")
    return "zero offsets, truncations, last layer, worked examples"


SUITES: dict[str, Callable[[], str]] = {
    "hungarian_optimality": hungarian_optimality,
    "gradient_check": gradient_check,
    "metric_oracles": metric_oracles,
    "refinement_identities": refinement_identities,
}


def run_suites(names=None) -> list[SuiteResult]:
    out = []
    for name in names or SUITES:
        start = time.perf_counter()
        try:
            detail = SUITES[name]()
            ok = True
        except PropertyFailure as exc:
            detail, ok = str(exc), False
        except Exception as exc:  # a crash inside a suite is a failure of that suite
            detail, ok = f"{type(exc).__name__}: {exc}", False
        out.append(SuiteResult(name, ok, detail, time.perf_counter() - start))
    return out


def format_table(results: list[SuiteResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'suite':<{width}}  status  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.detail}")
    return "\n".join(lines)
