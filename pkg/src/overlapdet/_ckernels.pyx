# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; mirror ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()


cdef inline double _dmin(double a, double b) nogil:
    return a if a < b else b


cdef inline double _dmax(double a, double b) nogil:
    return a if a > b else b


def assign_rows(cost):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    cdef Py_ssize_t m = c.shape[1] if n else 0
    if n > m:
        raise ValueError("assign_rows needs rows <= cols")
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef Py_ssize_t[::1] row_of = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(m + 1, dtype=np.intp)
    cdef char[::1] used = np.zeros(m + 1, dtype=np.int8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    with nogil:
        for i in range(1, n + 1):
            row_of[0] = i
            j0 = 0
            for j in range(m + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = row_of[j0]
                ui0 = u[i0]
                delta = INFINITY
                j1 = 0
                for j in range(1, m + 1):
                    if not used[j]:
                        cur = c[i0 - 1, j - 1] - ui0 - v[j]
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


def bilinear_sample(grid, xs, ys):
    cdef double[:, :, ::1] g = np.ascontiguousarray(grid, dtype=np.float64)
    cdef double[::1] px = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] py = np.ascontiguousarray(ys, dtype=np.float64)
    cdef Py_ssize_t h = g.shape[0], w = g.shape[1], nc = g.shape[2]
    cdef Py_ssize_t npts = px.shape[0]
    out_arr = np.zeros((npts, nc))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, k, i0, i1, j0, j1
    cdef double gx, gy, fx, fy, top, bottom
    with nogil:
        for p in range(npts):
            gx = _dmin(_dmax(px[p] * w - 0.5, 0.0), w - 1.0)
            gy = _dmin(_dmax(py[p] * h - 0.5, 0.0), h - 1.0)
            j0 = <Py_ssize_t>floor(gx)
            i0 = <Py_ssize_t>floor(gy)
            if j0 > w - 1:
                j0 = w - 1
            if i0 > h - 1:
                i0 = h - 1
            j1 = j0 + 1 if j0 + 1 < w else w - 1
            i1 = i0 + 1 if i0 + 1 < h else h - 1
            fx = gx - j0
            fy = gy - i0
            for k in range(nc):
                top = (1.0 - fx) * g[i0, j0, k] + fx * g[i0, j1, k]
                bottom = (1.0 - fx) * g[i1, j0, k] + fx * g[i1, j1, k]
                out[p, k] = (1.0 - fy) * top + fy * bottom
    return out_arr


def pairwise_giou(a, b, bint generalized=True):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], p, q
    out_arr = np.zeros((n, m))
    cdef double[:, ::1] out = out_arr
    cdef double ax1, ay1, ax2, ay2, bx1, by1, bx2, by2, aw, ah, bw, bh
    cdef double iw, ih, inter, union, enclose, val
    with nogil:
        for p in range(n):
            aw = A[p, 2]
            ah = A[p, 3]
            ax1 = A[p, 0] - 0.5 * aw
            ay1 = A[p, 1] - 0.5 * ah
            ax2 = A[p, 0] + 0.5 * aw
            ay2 = A[p, 1] + 0.5 * ah
            for q in range(m):
                bw = B[q, 2]
                bh = B[q, 3]
                bx1 = B[q, 0] - 0.5 * bw
                by1 = B[q, 1] - 0.5 * bh
                bx2 = B[q, 0] + 0.5 * bw
                by2 = B[q, 1] + 0.5 * bh
                iw = _dmax(_dmin(ax2, bx2) - _dmax(ax1, bx1), 0.0)
                ih = _dmax(_dmin(ay2, by2) - _dmax(ay1, by1), 0.0)
                inter = iw * ih
                union = _dmax(aw * ah + bw * bh - inter, 1e-12)
                val = inter / union
                if generalized:
                    enclose = _dmax((_dmax(ax2, bx2) - _dmin(ax1, bx1))
                                    * (_dmax(ay2, by2) - _dmin(ay1, by1)), 1e-12)
                    val = val - (enclose - union) / enclose
                out[p, q] = val
    return out_arr
