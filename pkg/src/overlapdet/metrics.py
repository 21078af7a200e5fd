"""Assignment-stability scores between epochs, and a small AP evaluator.

Each prediction slot ``n`` of an image gets two integers per epoch: ``V[n]``,
the index of the ground-truth object it was matched to, and ``T[n]``, that
object's class; both are -1 for an unmatched slot.

* FCS counts slots whose class changed while foreground in both epochs.
* FOS counts slots whose object changed while foreground in both epochs.
* FIS = (FCS + FOS) / (2 N_pred).
* IS counts every change of ``V`` (foreground/background flips included),
  divided by ``N_pred``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from overlapdet import kernels
from overlapdet.geometry import NormalizedBox

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class AssignmentRecord:
    epoch: int
    image_id: int
    V: tuple[int, ...]
    T: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "V", tuple(int(v) for v in self.V))
        object.__setattr__(self, "T", tuple(int(t) for t in self.T))
        if len(self.V) != len(self.T):
            raise ValueError("V and T must have equal length")
        for v, t in zip(self.V, self.T):
            if (v == -1) != (t == -1):
                raise ValueError("V and T disagree on which slots are unmatched")
            if v < -1 or t < -1:
                raise ValueError("indices must be >= -1")

    @property
    def num_predictions(self) -> int:
        return len(self.V)

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "image_id": self.image_id,
                           "V": list(self.V), "T": list(self.T)}, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "AssignmentRecord":
        obj = json.loads(line)
        if not isinstance(obj, dict):
            raise ValueError("record must be an object")
        missing = {"epoch", "image_id", "V", "T"} - obj.keys()
        if missing:
            raise ValueError(f"record missing fields {sorted(missing)}")
        if not isinstance(obj["V"], list) or not isinstance(obj["T"], list):
            raise ValueError("V and T must be integer arrays")
        if any(not isinstance(x, int) for x in obj["V"] + obj["T"]):
            raise ValueError("V and T must be integer arrays")
        return cls(int(obj["epoch"]), int(obj["image_id"]), obj["V"], obj["T"])


EpochLog = dict  # image_id -> AssignmentRecord


def _pair(rec_j: AssignmentRecord, rec_prev: AssignmentRecord):
    if rec_j.num_predictions != rec_prev.num_predictions:
        raise ValueError("records have different numbers of predictions")
    return (np.asarray(rec_j.V), np.asarray(rec_prev.V),
            np.asarray(rec_j.T), np.asarray(rec_prev.T))


def fcs(rec_j: AssignmentRecord, rec_prev: AssignmentRecord) -> int:
    _, _, t, tp = _pair(rec_j, rec_prev)
    return int(np.sum((t != tp) & (t != -1) & (tp != -1)))


def fos(rec_j: AssignmentRecord, rec_prev: AssignmentRecord) -> int:
    v, vp, _, _ = _pair(rec_j, rec_prev)
    return int(np.sum((v != vp) & (v != -1) & (vp != -1)))


def fis(rec_j: AssignmentRecord, rec_prev: AssignmentRecord) -> float:
    n = rec_j.num_predictions
    if n == 0:
        raise ValueError("FIS undefined for zero predictions")
    return (fcs(rec_j, rec_prev) + fos(rec_j, rec_prev)) / (2.0 * n)


def is_metric(rec_j: AssignmentRecord, rec_prev: AssignmentRecord) -> float:
    v, vp, _, _ = _pair(rec_j, rec_prev)
    if v.size == 0:
        raise ValueError("IS undefined for zero predictions")
    return float(np.sum(v != vp)) / v.size


def _check_images(log_j: Mapping, log_prev: Mapping):
    if set(log_j) != set(log_prev):
        raise ValueError("epoch logs cover different images")


def dataset_fis(log_j: Mapping[int, AssignmentRecord], log_prev: Mapping[int, AssignmentRecord]) -> float:
    _check_images(log_j, log_prev)
    if not log_j:
        raise ValueError("empty epoch log")
    return float(np.mean([fis(log_j[i], log_prev[i]) for i in sorted(log_j)]))


def dataset_is(log_j: Mapping[int, AssignmentRecord], log_prev: Mapping[int, AssignmentRecord]) -> float:
    _check_images(log_j, log_prev)
    if not log_j:
        raise ValueError("empty epoch log")
    return float(np.mean([is_metric(log_j[i], log_prev[i]) for i in sorted(log_j)]))


@dataclass(frozen=True)
class EpochInstability:
    epoch: int
    IS: float
    FCS: float
    FOS: float
    FIS: float


def epoch_instability(log_j: Mapping, log_prev: Mapping, epoch: int) -> EpochInstability:
    """Dataset means of IS, FCS, FOS and FIS for one pair of consecutive epochs."""
    _check_images(log_j, log_prev)
    ids = sorted(log_j)
    return EpochInstability(
        epoch,
        dataset_is(log_j, log_prev),
        float(np.mean([fcs(log_j[i], log_prev[i]) for i in ids])),
        float(np.mean([fos(log_j[i], log_prev[i]) for i in ids])),
        dataset_fis(log_j, log_prev),
    )


def group_by_epoch(records: Iterable[AssignmentRecord]) -> dict[int, dict[int, AssignmentRecord]]:
    out: dict[int, dict[int, AssignmentRecord]] = {}
    for rec in records:
        per_epoch = out.setdefault(rec.epoch, {})
        if rec.image_id in per_epoch:
            raise ValueError(f"duplicate record for image {rec.image_id} in epoch {rec.epoch}")
        per_epoch[rec.image_id] = rec
    return out


def read_log_lines(lines: Iterable[str]) -> list[AssignmentRecord]:
    """Parse log lines; raises ``ValueError`` naming the first bad line number."""
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(AssignmentRecord.from_json(line))
        except (ValueError, TypeError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return records


def instability_series(records: Iterable[AssignmentRecord]) -> list[EpochInstability]:
    by_epoch = group_by_epoch(records)
    epochs = sorted(by_epoch)
    return [epoch_instability(by_epoch[e], by_epoch[p], e) for p, e in zip(epochs, epochs[1:])]


def instability_csv(rows: Sequence[EpochInstability]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "IS", "FCS", "FOS", "FIS"])
    for r in rows:
        w.writerow([r.epoch, repr(r.IS), repr(r.FCS), repr(r.FOS), repr(r.FIS)])
    return buf.getvalue()


# -- average precision --------------------------------------------------------

@dataclass(frozen=True)
class DetectionResult:
    box: NormalizedBox
    class_id: int
    confidence: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass
class APSummary:
    AP: float
    AP50: float
    AP75: float
    per_threshold: dict[float, float] = field(default_factory=dict)
    per_class: dict[int, float] = field(default_factory=dict)


def _precision_at_recall(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP of one ranked list of true/false positives."""
    if num_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    # monotone envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    return float(sampled.mean())


def _box_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.stack([b.as_array() if isinstance(b, NormalizedBox) else np.asarray(b, dtype=np.float64)
                     for b in boxes])


def ap_eval(results: Sequence[Sequence[DetectionResult]], gts: Sequence[Sequence],
            iou_thresholds: Sequence[float] = COCO_THRESHOLDS) -> APSummary:
    """COCO-style AP over images; classes without ground truth are skipped.

    ``results[i]`` and ``gts[i]`` belong to image ``i``; ground truths are any
    objects with ``box`` and ``class_id`` attributes.  Detections are ranked by
    confidence with ties broken by image, then box coordinates, so the
    outcome does not depend on input order.
    """
    if len(results) != len(gts):
        raise ValueError("results and ground truths cover different numbers of images")
    thresholds = [float(t) for t in iou_thresholds]
    if any(not 0.0 < t <= 1.0 for t in thresholds):
        raise ValueError("IoU thresholds must lie in (0, 1]")
    classes = sorted({g.class_id for img in gts for g in img})
    if not classes or not thresholds:
        return APSummary(0.0, 0.0, 0.0, {t: 0.0 for t in thresholds}, {})

    per_class_thr = np.zeros((len(classes), len(thresholds)))
    for ci, c in enumerate(classes):
        dets = []
        gt_boxes = {}
        for img, (res, gimg) in enumerate(zip(results, gts)):
            gt_boxes[img] = _box_array([g.box for g in gimg if g.class_id == c])
            for d in res:
                if d.class_id == c:
                    dets.append((-d.confidence, img, tuple(d.box.as_array().tolist()), d))
        dets.sort(key=lambda x: x[:3])
        num_gt = sum(len(b) for b in gt_boxes.values())
        ious = [kernels.pairwise_giou(np.array(d[2]), gt_boxes[d[1]], generalized=False)[0]
                if len(gt_boxes[d[1]]) else np.zeros(0) for d in dets]
        for ti, thr in enumerate(thresholds):
            taken = {img: np.zeros(len(b), dtype=bool) for img, b in gt_boxes.items()}
            tp = np.zeros(len(dets))
            for di, d in enumerate(dets):
                overlaps = ious[di]
                if overlaps.size == 0:
                    continue
                cand = np.where(taken[d[1]], -1.0, overlaps)
                best = int(np.argmax(cand))
                if cand[best] >= thr:
                    taken[d[1]][best] = True
                    tp[di] = 1.0
            per_class_thr[ci, ti] = _precision_at_recall(tp, num_gt)

    per_thr = per_class_thr.mean(axis=0)
    by_thr = {t: float(v) for t, v in zip(thresholds, per_thr)}

    def at(t):
        for key, v in by_thr.items():
            if abs(key - t) < 1e-9:
                return v
        return float("nan")

    return APSummary(float(per_thr.mean()), at(0.5), at(0.75), by_thr,
                     {c: float(v) for c, v in zip(classes, per_class_thr.mean(axis=1))})
