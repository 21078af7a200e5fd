"""Pure-Python kernels; the reference twin of ``_ckernels.pyx``.

Both modules expose the same three functions with identical semantics and must
produce identical results (tests compare them entry by entry).
"""
from __future__ import annotations

import math

import numpy as np


def assign_rows(cost) -> list[int]:
    """Minimum-cost assignment of every row of an ``n x m`` matrix, ``n <= m``.

    Shortest augmenting paths with row/column potentials, O(n^2 m).  Rows are
    inserted in ascending order and columns scanned in ascending order with
    strict comparisons, so among equal reduced costs the lowest column wins.
    Returns ``col_of_row``.
    """
    n = len(cost)
    m = len(cost[0]) if n else 0
    if n > m:
        raise ValueError("assign_rows needs rows <= cols")
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    row_of = [0] * (m + 1)  # 1-based row matched to column j; 0 = free
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            crow = cost[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = crow[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[row_of[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while True:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = [-1] * n
    for j in range(1, m + 1):
        if row_of[j]:
            col_of_row[row_of[j] - 1] = j - 1
    return col_of_row


def bilinear_sample(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample an ``H x W x C`` grid at normalized points.

    Cell ``(i, j)`` sits at ``((j + 0.5)/W, (i + 0.5)/H)``; points beyond the
    outermost cell centers are clamped to the border.
    """
    h, w, c = grid.shape
    out = np.zeros((len(xs), c))
    for p in range(len(xs)):
        gx = min(max(float(xs[p]) * w - 0.5, 0.0), w - 1.0)
        gy = min(max(float(ys[p]) * h - 0.5, 0.0), h - 1.0)
        j0 = min(int(math.floor(gx)), w - 1)
        i0 = min(int(math.floor(gy)), h - 1)
        j1 = min(j0 + 1, w - 1)
        i1 = min(i0 + 1, h - 1)
        fx = gx - j0
        fy = gy - i0
        for k in range(c):
            top = (1.0 - fx) * grid[i0, j0, k] + fx * grid[i0, j1, k]
            bottom = (1.0 - fx) * grid[i1, j0, k] + fx * grid[i1, j1, k]
            out[p, k] = (1.0 - fy) * top + fy * bottom
    return out


def pairwise_giou(a: np.ndarray, b: np.ndarray, generalized: bool = True) -> np.ndarray:
    """``(n, m)`` IoU or GIoU between two stacks of center-size boxes."""
    n, m = len(a), len(b)
    out = np.zeros((n, m))
    for p in range(n):
        acx, acy, aw, ah = (float(v) for v in a[p])
        ax1, ay1, ax2, ay2 = acx - 0.5 * aw, acy - 0.5 * ah, acx + 0.5 * aw, acy + 0.5 * ah
        for g in range(m):
            bcx, bcy, bw, bh = (float(v) for v in b[g])
            bx1, by1 = bcx - 0.5 * bw, bcy - 0.5 * bh
            bx2, by2 = bcx + 0.5 * bw, bcy + 0.5 * bh
            iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
            ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
            inter = iw * ih
            union = max(aw * ah + bw * bh - inter, 1e-12)
            val = inter / union
            if generalized:
                enclose = max((max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1)), 1e-12)
                val -= (enclose - union) / enclose
            out[p, g] = val
    return out
