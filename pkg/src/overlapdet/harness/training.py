"""Training and evaluation of the toy decoder under a chosen assignment strategy
and refinement scheme.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from overlapdet import numeric as nm
from overlapdet.assignment import CategoryGroupLayout, CostWeights, category_match, cost_matrix, match, select_per_class, select_top
from overlapdet.geometry import NormalizedBox, paired_giou
from overlapdet.harness.decoder import (CategoryQueryLibrary, LayerParams, decoder_layer,
                                        encoder_proposals, positional_tags)
from overlapdet.harness.scene import Scene, make_scenes
from overlapdet.metrics import APSummary, AssignmentRecord, DetectionResult, ap_eval, epoch_instability
from overlapdet.refinement import LFD_SUM_EQUAL, RefinementTrace, RefineScheme

log = logging.getLogger(__name__)

STRATEGIES = ("baseline", "csa")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, image_id: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, image {image_id}")
        self.epoch = epoch
        self.image_id = image_id


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass(frozen=True)
class TrainConfig:
    num_layers: int = 3
    dim: int = 32
    num_queries: int = 6
    num_classes: int = 3
    epochs: int = 30
    learning_rate: float = 0.02
    seed: int = 0
    strategy: str = "csa"
    scheme: RefineScheme = LFD_SUM_EQUAL
    cost_weights: CostWeights = CostWeights()
    loss_weights: LossWeights = LossWeights()
    grad_clip: float = 0.5
    height: int = 32
    width: int = 32
    channels: int = 8
    num_train: int = 200
    num_val: int = 50
    data_seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.strategy == "csa" and self.num_queries % self.num_classes:
            raise ValueError("num_queries must be divisible by num_classes for csa")
        if self.num_layers < 1 or self.dim < 1 or self.epochs < 0:
            raise ValueError("num_layers, dim must be positive and epochs non-negative")
        if isinstance(self.scheme, str):
            object.__setattr__(self, "scheme", RefineScheme.parse(self.scheme))

    @property
    def per_group(self) -> int:
        return self.num_queries // self.num_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.name
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        if "cost_weights" in data and isinstance(data["cost_weights"], dict):
            data["cost_weights"] = CostWeights(**data["cost_weights"])
        if "loss_weights" in data and isinstance(data["loss_weights"], dict):
            data["loss_weights"] = LossWeights(**data["loss_weights"])
        if "scheme" in data and isinstance(data["scheme"], str):
            data["scheme"] = RefineScheme.parse(data["scheme"])
        return cls(**data)


def build_scenes(config: TrainConfig) -> tuple[list[Scene], list[Scene]]:
    """Training and validation scenes from ``config.data_seed`` (independent of the model seed)."""
    kw = dict(height=config.height, width=config.width, channels=config.channels)
    train = make_scenes(config.num_train, config.data_seed, config.num_classes,
                        config.per_group, start_id=0, **kw)
    val = make_scenes(config.num_val, config.data_seed + 7919, config.num_classes,
                      config.per_group, start_id=config.num_train, **kw)
    return train, val


@dataclass
class ModelParams:
    layers: list[LayerParams]
    queries: np.ndarray  # (N, D) for baseline, (K, D) prototypes for csa
    tags: np.ndarray | None = None

    def flat(self) -> list[np.ndarray]:
        out = [self.queries]
        for lp in self.layers:
            out.extend(lp.arrays())
        return out

    @classmethod
    def from_flat(cls, arrays: list, tags) -> "ModelParams":
        layers = [LayerParams(*arrays[1 + 3 * i:4 + 3 * i]) for i in range((len(arrays) - 1) // 3)]
        return cls(layers, arrays[0], tags)

    def copy(self) -> "ModelParams":
        return ModelParams.from_flat([np.array(a, copy=True) for a in self.flat()], self.tags)


def init_params(config: TrainConfig, rng: np.random.Generator | None = None) -> ModelParams:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    layers = [LayerParams.random(rng, config.dim, config.channels, config.num_classes)
              for _ in range(config.num_layers)]
    if config.strategy == "csa":
        prototypes = rng.normal(scale=0.5, size=(config.num_classes, config.dim))
        return ModelParams(layers, prototypes, positional_tags(config.per_group, config.dim))
    return ModelParams(layers, rng.normal(scale=0.5, size=(config.num_queries, config.dim)))


@dataclass
class Selection:
    """Initial references and, for csa, each query's class group."""

    refs: np.ndarray
    groups: np.ndarray | None


def select_references(scene: Scene, config: TrainConfig) -> Selection:
    boxes, scores = encoder_proposals(scene)
    if config.strategy == "csa":
        idx = select_per_class(scores, config.num_queries, config.num_classes)
        layout = CategoryGroupLayout(config.num_classes, config.num_queries)
        return Selection(boxes[idx], layout.groups())
    idx = select_top(scores.max(axis=1), config.num_queries)
    return Selection(boxes[idx], None)


def initial_queries(params: ModelParams, config: TrainConfig, queries=None):
    queries = params.queries if queries is None else queries
    if config.strategy == "csa":
        return CategoryQueryLibrary(queries, params.tags).expand()
    return queries


@dataclass
class ForwardPass:
    trace: RefinementTrace
    logits: list  # per layer (N, K)
    queries: list  # per layer (N, D)


def forward(params: ModelParams, scene: Scene, selection: Selection, config: TrainConfig,
            layer_params=None, queries=None) -> ForwardPass:
    """Run all layers.  ``layer_params``/``queries`` may be tape values standing in for ``params``."""
    layer_params = params.layers if layer_params is None else layer_params
    q = initial_queries(params, config, queries)
    trace = RefinementTrace.start(selection.refs)
    logits, qs = [], []
    for lp in layer_params:
        q, delta, cls_logits = decoder_layer(q, trace.detached_refs[-1], scene.features, lp)
        trace.push(delta)
        logits.append(cls_logits)
        qs.append(q)
    trace.finish(config.scheme)
    return ForwardPass(trace, logits, qs)


def assign(pred_boxes: np.ndarray, pred_logits: np.ndarray, scene: Scene, selection: Selection,
           config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Matched ``(query rows, gt cols)`` for one layer under the configured strategy."""
    if len(scene.gts) == 0:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty
    probs = nm.sigmoid(pred_logits)
    cost = cost_matrix(pred_boxes, probs, scene.gt_boxes, scene.gt_classes, config.cost_weights)
    if config.strategy == "csa":
        rows, cols, _ = category_match(cost, selection.groups, scene.gt_classes)
        return rows, cols
    return match(cost)


def layer_loss(box, logits, rows: np.ndarray, cols: np.ndarray, scene: Scene, config: TrainConfig):
    """Weighted classification + L1 + (1 - GIoU) loss of one layer's matched pairs."""
    w = config.loss_weights
    norm = float(max(1, len(scene.gts)))
    target = np.zeros(nm.value_of(logits).shape)
    if rows.size:
        target[rows, scene.gt_classes[cols]] = 1.0
    loss = w.cls * nm.total(nm.softplus(logits) - logits * target) / norm
    if rows.size:
        matched = box[rows]
        gt = scene.gt_boxes[cols]
        loss = loss + w.l1 * nm.total(nm.absolute(matched - gt)) / norm
        loss = loss + w.giou * nm.total(1.0 - paired_giou(matched, gt)) / norm
    return loss


@dataclass
class StepResult:
    loss: float
    final_rows: np.ndarray
    final_cols: np.ndarray
    grads: list[np.ndarray]
    layer_losses: list[float]


def scene_loss(params: ModelParams, scene: Scene, selection: Selection, config: TrainConfig,
               fixed_assignment: list | None = None):
    """Build the summed auxiliary loss on a fresh tape.

    Returns ``(tape, leaves, total, per-layer losses, per-layer assignments)``.
    """
    tape = nm.Tape()
    leaves = [tape.variable(a) for a in params.flat()]
    queries = leaves[0]
    layer_params = [LayerParams(*leaves[1 + 3 * i:4 + 3 * i]) for i in range(config.num_layers)]
    fp = forward(params, scene, selection, config, layer_params, queries)
    total = None
    per_layer, assignments = [], []
    for li in range(config.num_layers):
        box = fp.trace.reported[li]
        logits = fp.logits[li]
        if fixed_assignment is not None:
            rows, cols = fixed_assignment[li]
        else:
            rows, cols = assign(nm.value_of(box), nm.value_of(logits), scene, selection, config)
        ll = layer_loss(box, logits, rows, cols, scene, config)
        per_layer.append(ll)
        assignments.append((rows, cols))
        total = ll if total is None else total + ll
    return tape, leaves, total, per_layer, assignments


def train_step(params: ModelParams, scene: Scene, selection: Selection, config: TrainConfig) -> StepResult:
    tape, leaves, total, per_layer, assignments = scene_loss(params, scene, selection, config)
    grads = tape.backward(total)
    rows, cols = assignments[-1]
    return StepResult(float(total.value), rows, cols, [grads[v] for v in leaves],
                      [float(nm.value_of(l)) for l in per_layer])


def apply_gradients(params: ModelParams, grads: list[np.ndarray], lr: float, clip: float) -> None:
    """Fixed-rate descent step; each parameter array's gradient is clipped to norm ``clip``.

    Clipping per array keeps the large offset-head gradients from shrinking
    the step of every other block.  ``clip = 0`` disables it.
    """
    for p, g in zip(params.flat(), grads):
        norm = float(np.sqrt(np.sum(g * g)))
        scale = lr * clip / norm if clip and norm > clip else lr
        p -= scale * g


def record_of(rows: np.ndarray, cols: np.ndarray, scene: Scene, num_queries: int, epoch: int) -> AssignmentRecord:
    v = np.full(num_queries, -1, dtype=np.int64)
    t = np.full(num_queries, -1, dtype=np.int64)
    v[rows] = cols
    t[rows] = scene.gt_classes[cols]
    return AssignmentRecord(epoch, scene.image_id, v.tolist(), t.tolist())


# -- evaluation ---------------------------------------------------------------

@dataclass
class Evaluation:
    summary: APSummary
    per_layer: list[APSummary]
    detections: list[list[DetectionResult]]
    query_rows: list[tuple[int, int, list[float]]]


def _detections(boxes: np.ndarray, logits: np.ndarray, selection: Selection,
                config: TrainConfig) -> list[DetectionResult]:
    probs = nm.sigmoid(logits)
    out = []
    for n in range(boxes.shape[0]):
        if config.strategy == "csa":
            cls = int(selection.groups[n])
        else:
            cls = int(np.argmax(probs[n]))
        out.append(DetectionResult(NormalizedBox.from_array(np.clip(boxes[n], 1e-9, 1 - 1e-9)),
                                   cls, float(probs[n, cls])))
    return out


def evaluate(params: ModelParams, scenes: list[Scene], config: TrainConfig,
             selections: list[Selection] | None = None) -> Evaluation:
    """Inference on the detached single-step chain only.

    Every layer's chain boxes are scored, giving per-layer AP; the final layer
    gives the headline summary.  Final-layer query vectors are returned for
    export.
    """
    selections = selections or [select_references(s, config) for s in scenes]
    per_layer_dets: list[list[list[DetectionResult]]] = [[] for _ in range(config.num_layers)]
    query_rows = []
    qid = 0
    for scene, sel in zip(scenes, selections):
        fp = forward(params, scene, sel, config)
        for li in range(config.num_layers):
            per_layer_dets[li].append(_detections(fp.trace.detached_refs[li + 1],
                                                  np.asarray(fp.logits[li]), sel, config))
        final_q = np.asarray(fp.queries[-1])
        for n in range(final_q.shape[0]):
            group = int(sel.groups[n]) if sel.groups is not None else -1
            query_rows.append((qid, group, final_q[n].tolist()))
            qid += 1
    gts = [s.gts for s in scenes]
    per_layer = [ap_eval(dets, gts) for dets in per_layer_dets]
    return Evaluation(per_layer[-1], per_layer, per_layer_dets[-1], query_rows)


# -- training loop ------------------------------------------------------------

@dataclass
class EpochRow:
    epoch: int
    loss: float
    AP: float
    AP50: float
    IS: float | None
    FIS: float | None
    layer_ap: list[float] = field(default_factory=list)
    layer_ap50: list[float] = field(default_factory=list)


@dataclass
class TrainResult:
    params: ModelParams
    config: TrainConfig
    rows: list[EpochRow]
    logs: dict[int, dict[int, AssignmentRecord]]
    evaluation: Evaluation | None = None


def train(config: TrainConfig, train_scenes: list[Scene], val_scenes: list[Scene],
          params: ModelParams | None = None, on_epoch: Callable[[EpochRow], None] | None = None,
          evaluate_every: int = 1) -> TrainResult:
    """Plain per-scene gradient descent with per-layer auxiliary losses.

    Scenes are visited in a seeded random order each epoch.  The final
    layer's assignment of every training scene is logged per epoch.  Raises
    :class:`TrainingDiverged` on a non-finite loss.
    """
    params = params.copy() if params is not None else init_params(config)
    rng = np.random.default_rng([config.seed, 1])
    selections = [select_references(s, config) for s in train_scenes]
    val_selections = [select_references(s, config) for s in val_scenes]
    rows: list[EpochRow] = []
    logs: dict[int, dict[int, AssignmentRecord]] = {}
    evaluation = None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_scenes))
        epoch_log: dict[int, AssignmentRecord] = {}
        losses = []
        for i in order:
            scene, sel = train_scenes[i], selections[i]
            step = train_step(params, scene, sel, config)
            if not np.isfinite(step.loss) or not all(np.all(np.isfinite(g)) for g in step.grads):
                raise TrainingDiverged(epoch, scene.image_id, step.loss)
            apply_gradients(params, step.grads, config.learning_rate, config.grad_clip)
            losses.append(step.loss)
            epoch_log[scene.image_id] = record_of(step.final_rows, step.final_cols, scene,
                                                  config.num_queries, epoch)
        logs[epoch] = epoch_log
        inst = epoch_instability(epoch_log, logs[epoch - 1], epoch) if epoch - 1 in logs else None
        if val_scenes and (epoch % evaluate_every == 0 or epoch == config.epochs):
            evaluation = evaluate(params, val_scenes, config, val_selections)
            ap, ap50 = evaluation.summary.AP, evaluation.summary.AP50
            layer_ap = [s.AP for s in evaluation.per_layer]
            layer_ap50 = [s.AP50 for s in evaluation.per_layer]
        else:
            ap = ap50 = float("nan")
            layer_ap = layer_ap50 = []
        row = EpochRow(epoch, float(np.mean(losses)) if losses else 0.0, ap, ap50,
                       inst.IS if inst else None, inst.FIS if inst else None, layer_ap, layer_ap50)
        rows.append(row)
        log.info("epoch %d loss %.4f AP %.4f AP50 %.4f", epoch, row.loss, ap, ap50)
        if on_epoch:
            on_epoch(row)
    return TrainResult(params, config, rows, logs, evaluation)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
