"""Synthetic scenes where overlapping objects add up instead of occluding.

A scene is an ``H x W x C`` feature grid.  Each object contributes a Gaussian
blob whose 2-sigma extent is exactly its box (standard deviation half the box
width/height) times a fixed unit signature of its class; clutter blobs carry random
signatures.  Overlap is plain superposition, the way materials stack in a
transmission image.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from overlapdet import kernels
from overlapdet.assignment import GroundTruth
from overlapdet.geometry import NormalizedBox

SIGNATURE_SEED = 20240229


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    center: tuple[float, float]
    size: tuple[float, float]
    intensity: float = 1.0

    def box(self) -> np.ndarray:
        return np.array([self.center[0], self.center[1], self.size[0], self.size[1]])


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int
    objects: tuple[SceneObject, ...] = ()
    height: int = 32
    width: int = 32
    channels: int = 8
    seed: int = 0
    clutter: int = 3
    clutter_intensity: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        for obj in self.objects:
            if not 0 <= obj.class_id < self.num_classes:
                raise ValueError(f"object class {obj.class_id} outside [0, {self.num_classes})")
            cx, cy = obj.center
            w, h = obj.size
            if w <= 0 or h <= 0:
                raise ValueError("object sizes must be positive")
            if cx - w / 2 < 0 or cx + w / 2 > 1 or cy - h / 2 < 0 or cy + h / 2 > 1:
                raise ValueError(f"object box {obj.box().tolist()} falls outside the image")


@dataclass
class Scene:
    spec: SceneSpec
    features: np.ndarray
    gts: list[GroundTruth]
    image_id: int = 0
    gt_boxes: np.ndarray = field(init=False)
    gt_classes: np.ndarray = field(init=False)

    def __post_init__(self):
        self.gt_boxes = (np.stack([g.box.as_array() for g in self.gts])
                         if self.gts else np.zeros((0, 4)))
        self.gt_classes = np.array([g.class_id for g in self.gts], dtype=np.intp)


@lru_cache(maxsize=None)
def _signatures(num_classes: int, channels: int) -> np.ndarray:
    rng = np.random.default_rng(SIGNATURE_SEED)
    raw = rng.normal(size=(channels, max(num_classes, 1)))
    if num_classes <= channels:
        q, _ = np.linalg.qr(raw)
        sig = q[:, :num_classes].T
    else:
        sig = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
    sig.setflags(write=False)
    return sig


def class_signatures(num_classes: int, channels: int) -> np.ndarray:
    """``(K, C)`` unit rows, mutually orthogonal when ``K <= C``."""
    return _signatures(num_classes, channels).copy()


def _blob(xs: np.ndarray, ys: np.ndarray, cx, cy, w, h) -> np.ndarray:
    sx, sy = w / 2.0, h / 2.0
    return np.exp(-0.5 * (((xs - cx) / sx) ** 2 + ((ys - cy) / sy) ** 2))


def generate_scene(spec: SceneSpec, image_id: int = 0) -> Scene:
    h, w, c = spec.height, spec.width, spec.channels
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    feats = np.zeros((h, w, c))
    sig = _signatures(spec.num_classes, c)
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.clutter):
        cx, cy = rng.uniform(0.05, 0.95, size=2)
        bw, bh = rng.uniform(0.05, 0.2, size=2)
        direction = rng.normal(size=c)
        direction /= np.linalg.norm(direction)
        amp = spec.clutter_intensity * rng.uniform(0.5, 1.0)
        feats += (amp * _blob(xs, ys, cx, cy, bw, bh))[..., None] * direction
    gts = []
    for obj in spec.objects:
        cx, cy = obj.center
        bw, bh = obj.size
        feats += (obj.intensity * _blob(xs, ys, cx, cy, bw, bh))[..., None] * sig[obj.class_id]
        gts.append(GroundTruth(NormalizedBox(float(cx), float(cy), float(bw), float(bh)), obj.class_id))
    return Scene(spec, feats, gts, image_id)


def bilinear_sample(features: np.ndarray, point: tuple[float, float]) -> np.ndarray:
    """Feature vector at a normalized ``(x, y)``; outside points clamp to the border."""
    x, y = point
    return kernels.bilinear_sample(features, [x], [y])[0]


def random_scene_spec(rng: np.random.Generator, num_classes: int, max_per_class: int,
                      max_objects: int = 4, overlap_prob: float = 0.6, **kwargs) -> SceneSpec:
    """Draw a scene with 1..max_objects objects, at most ``max_per_class`` per class.

    With probability ``overlap_prob`` each new object is centered close to an
    existing one so that their blobs superpose.
    """
    max_objects = max(1, min(max_objects, num_classes * max_per_class))
    count = int(rng.integers(1, max_objects + 1))
    per_class = np.zeros(num_classes, dtype=int)
    objects: list[SceneObject] = []
    while len(objects) < count:
        cls = int(rng.integers(num_classes))
        if per_class[cls] >= max_per_class:
            continue
        bw, bh = rng.uniform(0.15, 0.4, size=2)
        if objects and rng.random() < overlap_prob:
            anchor = objects[int(rng.integers(len(objects)))]
            cx, cy = np.asarray(anchor.center) + rng.uniform(-0.15, 0.15, size=2)
        else:
            cx, cy = rng.uniform(0.0, 1.0, size=2)
        cx = float(np.clip(cx, bw / 2 + 0.01, 1 - bw / 2 - 0.01))
        cy = float(np.clip(cy, bh / 2 + 0.01, 1 - bh / 2 - 0.01))
        objects.append(SceneObject(cls, (cx, cy), (float(bw), float(bh)),
                                   float(rng.uniform(0.8, 1.2))))
        per_class[cls] += 1
    return SceneSpec(num_classes, tuple(objects), seed=int(rng.integers(2**31)), **kwargs)


def make_scenes(count: int, seed: int, num_classes: int, max_per_class: int,
                start_id: int = 0, **kwargs) -> list[Scene]:
    """``count`` scenes drawn from one seeded stream; ids run from ``start_id``."""
    rng = np.random.default_rng(seed)
    specs = [random_scene_spec(rng, num_classes, max_per_class, **kwargs) for _ in range(count)]
    return [generate_scene(s, start_id + i) for i, s in enumerate(specs)]


def micro_scene(num_classes: int = 3, **kwargs) -> Scene:
    """One object larger than any proposal anchor: the fixed overfit instance.

    No anchor reaches IoU 0.5 with the box, so AP50 starts at 0 and can only
    reach 1 by learning the box offsets.
    """
    objects = (SceneObject(1, (0.45, 0.55), (0.5, 0.4)),)
    spec = SceneSpec(num_classes, objects, seed=5, **kwargs)
    return generate_scene(spec)
