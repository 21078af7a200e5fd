"""Normalized center-size boxes, logit-space transforms, and overlap measures.

Boxes are ``(cx, cy, w, h)`` fractions of the image extent.  The overlap
functions accept numpy arrays of shape ``(..., 4)`` or tape values from
:mod:`overlapdet.numeric`, so the same code computes matching costs and the
differentiable regression loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from overlapdet import numeric as nm

LOGIT_EPS = 1e-5
_AREA_FLOOR = 1e-12


@dataclass(frozen=True)
class NormalizedBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float, np.floating)) and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite real, got {v!r}")
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v!r} outside the open interval (0, 1)")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "NormalizedBox":
        cx, cy, w, h = (float(v) for v in np.asarray(arr, dtype=np.float64).reshape(4))
        return cls(cx, cy, w, h)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h,
                self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)


@dataclass(frozen=True)
class LogitBox:
    ux: float
    uy: float
    uw: float
    uh: float

    def __post_init__(self):
        for name in ("ux", "uy", "uw", "uh"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.ux, self.uy, self.uw, self.uh], dtype=np.float64)


@dataclass(frozen=True)
class BoxOffset:
    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self):
        for name in ("dx", "dy", "dw", "dh"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


def sigmoid_box(u: LogitBox) -> NormalizedBox:
    """Coordinate-wise logistic map from logit space back to (0,1)."""
    arr = u.as_array()
    if not np.all(np.isfinite(arr)):
        raise ValueError("logit box must be finite")
    return NormalizedBox.from_array(nm.sigmoid(arr))


def inverse_sigmoid(x, eps: float = LOGIT_EPS):
    """``ln(c/(1-c))`` after clamping ``c`` into ``[eps, 1-eps]``.

    Works on arrays and tape values.
    """
    x = nm.clamp_max(nm.clamp_min(x, eps), 1.0 - eps)
    return nm.logit(x)


def inverse_sigmoid_box(b: NormalizedBox, eps: float = LOGIT_EPS) -> LogitBox:
    ux, uy, uw, uh = (float(v) for v in inverse_sigmoid(b.as_array(), eps))
    return LogitBox(ux, uy, uw, uh)


def to_corners(boxes):
    """``(..., 4)`` center-size to ``(x1, y1, x2, y2)`` components."""
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h


def _overlap_terms(a, b):
    ax1, ay1, ax2, ay2 = to_corners(a)
    bx1, by1, bx2, by2 = to_corners(b)
    iw = nm.clamp_min(nm.minimum(ax2, bx2) - nm.maximum(ax1, bx1), 0.0)
    ih = nm.clamp_min(nm.minimum(ay2, by2) - nm.maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    ew = nm.maximum(ax2, bx2) - nm.minimum(ax1, bx1)
    eh = nm.maximum(ay2, by2) - nm.minimum(ay1, by1)
    enclose = ew * eh
    return inter, union, enclose


def paired_iou(a, b):
    """Row-wise IoU of two equally shaped ``(..., 4)`` box stacks."""
    inter, union, _ = _overlap_terms(a, b)
    return inter / nm.clamp_min(union, _AREA_FLOOR)


def _giou_parts(a, b):
    acx, acy, aw, ah = (a[..., i] for i in range(4))
    bcx, bcy, bw, bh = (b[..., i] for i in range(4))
    ax1, ax2, ay1, ay2 = acx - aw / 2, acx + aw / 2, acy - ah / 2, acy + ah / 2
    bx1, bx2, by1, by2 = bcx - bw / 2, bcx + bw / 2, bcy - bh / 2, bcy + bh / 2
    iw_raw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih_raw = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    ew = np.maximum(ax2, bx2) - np.minimum(ax1, bx1)
    eh = np.maximum(ay2, by2) - np.minimum(ay1, by1)
    enclose = ew * eh
    return locals()


def _giou_forward(a, b):
    t = _giou_parts(a, b)
    us = np.maximum(t["union"], _AREA_FLOOR)
    es = np.maximum(t["enclose"], _AREA_FLOOR)
    return t["inter"] / us - (es - us) / es


def _giou_vjp(g, out, a, b):
    t = _giou_parts(a, b)
    us = np.maximum(t["union"], _AREA_FLOOR)
    es = np.maximum(t["enclose"], _AREA_FLOOR)
    g_union = g * (1.0 / es - t["inter"] / us ** 2) * (t["union"] >= _AREA_FLOOR)
    g_encl = -g * us / es ** 2 * (t["enclose"] >= _AREA_FLOOR)
    g_inter = g / us - g_union
    g_iw = g_inter * t["ih"] * (t["iw_raw"] >= 0.0)
    g_ih = g_inter * t["iw"] * (t["ih_raw"] >= 0.0)
    g_ew, g_eh = g_encl * t["eh"], g_encl * t["ew"]

    def corner_grads(lo_a, hi_a, lo_b, hi_b, g_in, g_en):
        # intersection: min(hi) - max(lo); enclosure: max(hi) - min(lo); ties go to ``a``
        ga_hi = g_in * (hi_a <= hi_b) + g_en * (hi_a >= hi_b)
        gb_hi = g_in * (hi_a > hi_b) + g_en * (hi_a < hi_b)
        ga_lo = -g_in * (lo_a >= lo_b) - g_en * (lo_a <= lo_b)
        gb_lo = -g_in * (lo_a < lo_b) - g_en * (lo_a > lo_b)
        return ga_lo, ga_hi, gb_lo, gb_hi

    gax1, gax2, gbx1, gbx2 = corner_grads(t["ax1"], t["ax2"], t["bx1"], t["bx2"], g_iw, g_ew)
    gay1, gay2, gby1, gby2 = corner_grads(t["ay1"], t["ay2"], t["by1"], t["by2"], g_ih, g_eh)
    ga = np.stack([gax1 + gax2, gay1 + gay2,
                   (gax2 - gax1) / 2 + g_union * t["ah"], (gay2 - gay1) / 2 + g_union * t["aw"]], axis=-1)
    gb = np.stack([gbx1 + gbx2, gby1 + gby2,
                   (gbx2 - gbx1) / 2 + g_union * t["bh"], (gby2 - gby1) / 2 + g_union * t["bw"]], axis=-1)
    return ga, gb


paired_giou = nm.primitive("giou", _giou_forward, _giou_vjp)
paired_giou.__doc__ = """Row-wise generalized IoU ``IoU - (C - U)/C``, one fused tape operation."""


def iou(a: NormalizedBox, b: NormalizedBox) -> float:
    return float(paired_iou(a.as_array(), b.as_array()))


def giou(a: NormalizedBox, b: NormalizedBox) -> float:
    return float(paired_giou(a.as_array(), b.as_array()))


def l1_box_distance(a: NormalizedBox, b: NormalizedBox) -> float:
    return float(np.sum(np.abs(a.as_array() - b.as_array())))


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(n, m)`` matrix of summed absolute coordinate differences."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)


def pairwise_giou_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return paired_giou(a[:, None, :], b[None, :, :])
