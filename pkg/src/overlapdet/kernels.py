"""Hot-loop kernels with import-time backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise, or
when ``OVERLAPDET_PURE_PYTHON`` is set to a non-empty value, the pure-Python
twin in ``_pykernels`` is used.  ``BACKEND`` names the active one.
"""
from __future__ import annotations

import os

import numpy as np

from overlapdet import _pykernels

if os.environ.get("OVERLAPDET_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from overlapdet import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"


def backend_module(name=None):
    """Kernel module by name (``"python"`` or ``"cython"``); active one by default.

    A module passed in is returned unchanged.
    """
    if name is None:
        return _impl
    if not isinstance(name, str):
        return name
    if name == "python":
        return _pykernels
    if name == "cython":
        from overlapdet import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def linear_assignment(cost, impl=None) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one matching of a rectangular matrix.

    Returns ``(rows, cols)`` sorted by row, of length ``min(n, m)``.  Tall
    matrices are solved on their transpose.
    """
    impl = backend_module(impl)
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError("cost must be a non-empty 2-d matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost entries must be finite")
    n, m = cost.shape
    if n <= m:
        cols = impl.assign_rows(cost)
        return np.arange(n, dtype=np.intp), np.asarray(cols, dtype=np.intp)
    rows_of_col = impl.assign_rows(np.ascontiguousarray(cost.T))
    rows = np.asarray(rows_of_col, dtype=np.intp)
    cols = np.arange(m, dtype=np.intp)
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]


def bilinear_sample(grid, xs, ys, impl=None) -> np.ndarray:
    impl = backend_module(impl)
    return impl.bilinear_sample(grid, np.asarray(xs, dtype=np.float64).ravel(),
                                np.asarray(ys, dtype=np.float64).ravel())


def pairwise_giou(a, b, generalized: bool = True, impl=None) -> np.ndarray:
    impl = backend_module(impl)
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return impl.pairwise_giou(a, b, generalized)
