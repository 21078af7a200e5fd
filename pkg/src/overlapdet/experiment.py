"""Manifest-driven experiment runs and the strategy x scheme ablation grid.

Layout under the output root::

    <root>/<name>/<strategy>__<scheme>/seed_<s>/metrics.csv
                                               layer_ap.csv
                                               assignments.jsonl
                                               queries.csv
    <root>/<name>/summary.csv

All CSV floats are written with ``repr`` so they read back bit-exactly.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from overlapdet.harness.training import STRATEGIES, TrainConfig, TrainingDiverged, build_scenes, train
from overlapdet.refinement import ALL_SCHEMES, RefineScheme

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "OVERLAPDET_OUTPUT_ROOT"
LAST_EPOCHS = 10


class ManifestError(ValueError):
    pass


@dataclass
class ExperimentManifest:
    name: str
    config: TrainConfig
    output_dir: Path
    seeds: list[int]
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    schemes: list[RefineScheme] = field(default_factory=lambda: list(ALL_SCHEMES))
    workers: int = 1

    @property
    def root(self) -> Path:
        return self.output_dir / self.name

    def cells(self) -> list[TrainConfig]:
        return [replace(self.config, strategy=st, scheme=sc)
                for st in self.strategies for sc in self.schemes]


def load_manifest(path: str | Path) -> ExperimentManifest:
    """Read a JSON manifest.

    Keys: ``name``, ``output_dir``, ``seeds`` (non-empty list), ``config``
    (TrainConfig fields), optional ``grid`` with ``strategies``/``schemes``,
    optional ``workers``.  ``$OVERLAPDET_OUTPUT_ROOT`` overrides ``output_dir``.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ManifestError("manifest must be a JSON object")
    try:
        name = str(data["name"])
        seeds = [int(s) for s in data["seeds"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"manifest needs 'name' and integer 'seeds': {exc}") from None
    if not seeds:
        raise ManifestError("seed list must be non-empty")
    if not name or "/" in name or name in (".", ".."):
        raise ManifestError(f"invalid experiment name {name!r}")
    out = os.environ.get(OUTPUT_ROOT_ENV) or data.get("output_dir") or "runs"
    try:
        config = TrainConfig.from_dict(data.get("config", {}))
        grid = data.get("grid", {})
        strategies = list(grid.get("strategies", [config.strategy] if "grid" not in data else STRATEGIES))
        schemes = [RefineScheme.parse(s) for s in grid.get(
            "schemes", [config.scheme.name] if "grid" not in data else [s.name for s in ALL_SCHEMES])]
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"invalid config: {exc}") from None
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad:
        raise ManifestError(f"unknown strategies {bad}")
    return ExperimentManifest(name, config, Path(out), seeds, strategies, schemes,
                              int(data.get("workers", 1)))


def cell_name(config: TrainConfig) -> str:
    return f"{config.strategy}__{config.scheme.name}"


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class SeedOutcome:
    seed: int
    directory: Path
    failed: bool = False
    message: str = ""


def run_seed(config: TrainConfig, seed: int, directory: Path) -> SeedOutcome:
    """Train one seed and write its four output files."""
    config = replace(config, seed=seed)
    train_scenes, val_scenes = build_scenes(config)
    try:
        result = train(config, train_scenes, val_scenes)
    except TrainingDiverged as exc:
        _atomic_write(directory / "FAILED", f"{exc}\n")
        return SeedOutcome(seed, directory, True, str(exc))
    metric_rows = [[r.epoch, _fmt(r.loss), _fmt(r.AP), _fmt(r.AP50), _fmt(r.IS), _fmt(r.FIS)]
                   for r in result.rows]
    _atomic_write(directory / "metrics.csv",
                  _csv_text(["epoch", "loss", "AP", "AP50", "IS", "FIS"], metric_rows))
    layer_rows = [[r.epoch, li + 1, _fmt(ap), _fmt(ap50)]
                  for r in result.rows for li, (ap, ap50) in enumerate(zip(r.layer_ap, r.layer_ap50))]
    _atomic_write(directory / "layer_ap.csv", _csv_text(["epoch", "layer", "AP", "AP50"], layer_rows))
    lines = [rec.to_json() for e in sorted(result.logs) for _, rec in sorted(result.logs[e].items())]
    _atomic_write(directory / "assignments.jsonl", "\n".join(lines) + "\n")
    q_rows = []
    if result.evaluation is not None:
        q_rows = [[qid, group] + [_fmt(v) for v in vec] for qid, group, vec in result.evaluation.query_rows]
    _atomic_write(directory / "queries.csv",
                  _csv_text(["query_id", "group_k"] + [f"q{d}" for d in range(config.dim)], q_rows))
    failed_marker = directory / "FAILED"
    if failed_marker.exists():
        failed_marker.unlink()
    return SeedOutcome(seed, directory)


def _job(args) -> SeedOutcome:
    config, seed, directory = args
    return run_seed(config, seed, Path(directory))


SUMMARY_FIELDS = ["strategy", "scheme", "seeds", "failed", "AP_median", "AP_min", "AP_max",
                  "AP50_median", "FIS_final_median", "IS_final_median", "FIS_last10_median",
                  "IS_last10_median"]


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def seed_statistics(directory: Path) -> dict:
    """Final-epoch and last-10-epoch numbers read back from a seed's CSVs."""
    rows = _read_csv(directory / "metrics.csv")
    last = rows[-1]
    tail = [r for r in rows[-LAST_EPOCHS:] if r["FIS"] != ""]
    out = {
        "AP": float(last["AP"]),
        "AP50": float(last["AP50"]),
        "FIS_final": float(last["FIS"]) if last["FIS"] else float("nan"),
        "IS_final": float(last["IS"]) if last["IS"] else float("nan"),
        "FIS_last10": statistics.fmean(float(r["FIS"]) for r in tail) if tail else float("nan"),
        "IS_last10": statistics.fmean(float(r["IS"]) for r in tail) if tail else float("nan"),
    }
    final_epoch = last["epoch"]
    for r in _read_csv(directory / "layer_ap.csv"):
        if r["epoch"] == final_epoch:
            out[f"layer{r['layer']}_AP"] = float(r["AP"])
    return out


def summarize_cell(config: TrainConfig, outcomes: list[SeedOutcome]) -> dict:
    ok = [seed_statistics(o.directory) for o in outcomes if not o.failed]
    row = {"strategy": config.strategy, "scheme": config.scheme.name,
           "seeds": len(outcomes), "failed": sum(o.failed for o in outcomes)}

    def med(key):
        vals = [s[key] for s in ok if key in s]
        return statistics.median(vals) if vals else float("nan")

    aps = [s["AP"] for s in ok]
    row.update({
        "AP_median": med("AP"),
        "AP_min": min(aps) if aps else float("nan"),
        "AP_max": max(aps) if aps else float("nan"),
        "AP50_median": med("AP50"),
        "FIS_final_median": med("FIS_final"),
        "IS_final_median": med("IS_final"),
        "FIS_last10_median": med("FIS_last10"),
        "IS_last10_median": med("IS_last10"),
    })
    for layer in range(1, config.num_layers + 1):
        row[f"layer{layer}_AP_median"] = med(f"layer{layer}_AP")
    return row


def summary_csv(rows: list[dict], num_layers: int) -> str:
    fields = SUMMARY_FIELDS + [f"layer{l}_AP_median" for l in range(1, num_layers + 1)]
    out = []
    for r in rows:
        out.append([r[f] if isinstance(r[f], (str, int)) else _fmt(r[f]) for f in fields])
    return _csv_text(fields, out)


def run_manifest(manifest: ExperimentManifest, workers: int | None = None) -> list[dict]:
    """Run every (cell, seed) of the manifest; failed seeds are recorded, not fatal."""
    workers = workers or manifest.workers
    jobs = []
    for cell in manifest.cells():
        for seed in manifest.seeds:
            jobs.append((cell, seed, str(manifest.root / cell_name(cell) / f"seed_{seed}")))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_job, jobs))
    else:
        outcomes = []
        for job in jobs:
            log.info("running %s seed %d", cell_name(job[0]), job[1])
            outcomes.append(_job(job))
    rows = []
    per_cell = len(manifest.seeds)
    for ci, cell in enumerate(manifest.cells()):
        rows.append(summarize_cell(cell, outcomes[ci * per_cell:(ci + 1) * per_cell]))
    _atomic_write(manifest.root / "summary.csv", summary_csv(rows, manifest.config.num_layers))
    return rows
