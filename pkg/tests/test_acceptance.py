"""One test per acceptance criterion; each prints a single PASS/FAIL line.

The training criteria share one set of runs on the default benchmark (five
seeds each of CSA under LFO, LFT and LFD Sum/Equal, plus the baseline
matcher under LFD Sum/Equal), roughly seven minutes on one core.
"""
import csv
import itertools
import json
import math
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest

from overlapdet import metrics
from overlapdet.assignment import hungarian
from overlapdet.cli import main
from overlapdet.experiment import ExperimentManifest, run_manifest, run_seed
from overlapdet.harness.scene import micro_scene
from overlapdet.harness.training import TrainConfig, train
from overlapdet.metrics import AssignmentRecord
from overlapdet.refinement import (ALL_SCHEMES, LFD_SUM_EQUAL, LFO, LFT, empirical_gradient_flow,
                                   gradient_flow, scheme_box)

SEEDS = [0, 1, 2, 3, 4]
CELLS = {"csa_lfo": ("csa", LFO), "csa_lft": ("csa", LFT), "csa_lfd": ("csa", LFD_SUM_EQUAL),
         "baseline_lfd": ("baseline", LFD_SUM_EQUAL)}


def brute_force_total(cost):
    n, m = cost.shape
    t = cost if n <= m else cost.T
    return min(math.fsum(t[i, p[i]] for i in range(t.shape[0]))
               for p in itertools.permutations(range(t.shape[1]), t.shape[0]))


def test_hungarian_matches_enumeration(acceptance_report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = 0
    for k in range(1000):
        n, m = (int(x) for x in rng.integers(1, 7, size=2))
        cost = rng.integers(0, 10, size=(n, m)).astype(float) if k % 2 else rng.uniform(size=(n, m))
        a = hungarian(cost)
        total = math.fsum(cost[r, c] for r, c in a.pairs)
        mismatches += total != brute_force_total(cost) or len(a.pairs) != min(n, m)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10.0
    acceptance_report("hungarian equals brute force on 1000 matrices up to 6x6, < 10 s", ok,
                      f"{mismatches} mismatches, {elapsed:.2f} s")
    assert ok


def test_gradient_reach_matches_symbolic_pattern(acceptance_report):
    start = time.perf_counter()
    bad = []
    for layers in (3, 6):
        want_lfo = np.eye(layers, dtype=bool)
        want_lft = want_lfo | np.eye(layers, k=1, dtype=bool)
        want_lfd = np.triu(np.ones((layers, layers), dtype=bool))
        for scheme in ALL_SCHEMES:
            want = {"lfo": want_lfo, "lft": want_lft}.get(scheme.name, want_lfd)
            tape_reach, fd_reach, agree = empirical_gradient_flow(scheme, layers, np.random.default_rng(layers))
            if not (agree and np.array_equal(tape_reach.reach, want) and np.array_equal(fd_reach.reach, want)
                    and np.array_equal(gradient_flow(scheme, layers).reach, want)):
                bad.append(f"{scheme.name}/L={layers}")
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 30.0
    acceptance_report("gradient reach (tape and finite differences) matches pattern, L=3,6, all schemes, < 30 s",
                      ok, f"{16 - len(bad)}/16 configurations, {elapsed:.2f} s")
    assert ok, bad


def test_refinement_identities(acceptance_report):
    rng = np.random.default_rng(5)
    checks = {}
    ref = rng.uniform(0.1, 0.9, size=(3, 4))
    offs = [rng.normal(size=(3, 4)) for _ in range(4)]
    checks["zero offsets give the reference"] = all(
        np.allclose(scheme_box(ref, [np.zeros((3, 4))] * 4, l, s), ref, rtol=0, atol=1e-12)
        for s in ALL_SCHEMES for l in range(1, 5))
    checks["two summands equal look-forward-twice"] = all(
        np.array_equal(scheme_box(ref, offs[:l + 1], l, LFD_SUM_EQUAL), scheme_box(ref, offs[:l + 1], l, LFT))
        for l in range(1, 4))
    checks["one summand equals look-forward-once"] = all(
        np.array_equal(scheme_box(ref, offs[:l], l, LFD_SUM_EQUAL), scheme_box(ref, offs[:l], l, LFO))
        for l in range(1, 5))
    checks["last layer: dense sum equals look-forward-once"] = np.array_equal(
        scheme_box(ref, offs, 4, LFD_SUM_EQUAL), scheme_box(ref, offs, 4, LFO))
    worked = float(scheme_box(np.full(4, 0.5), [np.full(4, 0.2), np.full(4, 0.1), np.full(4, 0.4)],
                              1, LFD_SUM_EQUAL)[0])
    checks["worked example 0.66819"] = abs(worked - 0.66819) <= 1e-5
    ok = all(checks.values())
    acceptance_report("refinement identities and worked example", ok,
                      ", ".join(k for k, v in checks.items() if not v) or f"sigma(0.7) = {worked:.6f}")
    assert ok, checks


def test_metric_oracles(acceptance_report):
    def rec(v, t):
        return AssignmentRecord(0, 0, v, t)
    prev, cur = rec([0, 1, 2, -1], [7, 7, 7, -1]), rec([1, 0, 2, -1], [7, 7, 7, -1])
    hand = {
        "FCS": (metrics.fcs(cur, prev), 0),
        "FOS": (metrics.fos(cur, prev), 2),
        "FIS": (metrics.fis(cur, prev), 0.25),
        "FCS class swap": (metrics.fcs(rec([0, -1, 1], [4, -1, 5]), rec([0, -1, 1], [3, -1, 5])), 1),
        "IS one flip": (metrics.is_metric(rec([0, 1], [0, 0]), rec([0, -1], [0, -1])), 0.5),
        "IS identical": (metrics.is_metric(prev, prev), 0.0),
    }
    exact = all(got == want for got, want in hand.values())
    rng = np.random.default_rng(17)
    violations = 0
    for _ in range(1000):
        n, gts = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        classes = rng.integers(0, 3, size=gts)

        def draw():
            v = rng.integers(-1, gts, size=n).tolist()
            return rec(v, [int(classes[x]) if x >= 0 else -1 for x in v])
        a, b = draw(), draw()
        f = metrics.fis(a, b)
        violations += not (0.0 <= f <= 1.0 and metrics.fis(a, a) == 0.0 and metrics.is_metric(a, a) == 0.0
                           and 0.0 <= metrics.is_metric(a, b) <= 1.0)
    ok = exact and violations == 0
    acceptance_report("metric oracles exact; FIS bounds over 1000 random log pairs", ok,
                      f"hand values {'exact' if exact else hand}, {violations} bound violations")
    assert ok


# -- training criteria ----------------------------------------------------------

@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    """Run each shared cell once; returns ``{cell: (root, seconds)}``."""
    base = tmp_path_factory.mktemp("bench")
    out = {}
    for key, (strategy, scheme) in CELLS.items():
        config = TrainConfig(strategy=strategy, scheme=scheme)
        manifest = ExperimentManifest(key, config, base, SEEDS, [strategy], [scheme])
        start = time.perf_counter()
        run_manifest(manifest, workers=1)
        out[key] = (manifest.root / f"{strategy}__{scheme.name}", time.perf_counter() - start)
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def last10_fis(seed_dir):
    rows = [r for r in read_rows(seed_dir / "metrics.csv")[-10:] if r["FIS"]]
    return statistics.fmean(float(r["FIS"]) for r in rows)


def final_ap(seed_dir):
    return float(read_rows(seed_dir / "metrics.csv")[-1]["AP"])


def test_csa_purity(benchmark_runs, acceptance_report):
    root, _ = benchmark_runs["csa_lfd"]
    config = TrainConfig()
    groups = np.repeat(np.arange(config.num_classes), config.per_group)
    bad = checked = 0
    epochs = set()
    for seed in SEEDS:
        with open(root / f"seed_{seed}" / "assignments.jsonl") as fh:
            for rec in metrics.read_log_lines(fh):
                epochs.add(rec.epoch)
                for n, t in enumerate(rec.T):
                    if t >= 0:
                        checked += 1
                        bad += t != groups[n]
    ok = bad == 0 and epochs == set(range(1, config.epochs + 1)) and checked > 0
    acceptance_report("CSA purity over full default runs, every epoch", ok,
                      f"{bad} cross-class pairs among {checked} matched queries, {len(epochs)} epochs")
    assert ok


def test_csa_lowers_fis(benchmark_runs, acceptance_report):
    csa_root, t_csa = benchmark_runs["csa_lfd"]
    base_root, t_base = benchmark_runs["baseline_lfd"]
    csa = [last10_fis(csa_root / f"seed_{s}") for s in SEEDS]
    base = [last10_fis(base_root / f"seed_{s}") for s in SEEDS]
    m_csa, m_base = statistics.median(csa), statistics.median(base)
    wins = sum(c < b for c in csa for b in base) / (len(csa) * len(base))
    elapsed = t_csa + t_base
    ok = m_csa < m_base and elapsed <= 600
    acceptance_report("median last-10-epoch FIS lower for CSA than baseline (5 seeds, <= 10 min)", ok,
                      f"CSA {m_csa:.4f} vs baseline {m_base:.4f}, difference {m_base - m_csa:.4f}, "
                      f"relative {(m_base - m_csa) / m_base:.1%}, P(CSA < baseline) = {wins:.2f}, "
                      f"{elapsed:.0f} s")
    assert ok


def test_per_layer_ap_ordering(benchmark_runs, acceptance_report):
    med = {}
    elapsed = 0.0
    for key in ("csa_lfo", "csa_lft", "csa_lfd"):
        root, seconds = benchmark_runs[key]
        elapsed += seconds
        med[key] = statistics.median(final_ap(root / f"seed_{s}") for s in SEEDS)
        assert (root / "seed_0" / "layer_ap.csv").exists()
    ok = med["csa_lfd"] >= med["csa_lft"] >= med["csa_lfo"] - 0.01 and elapsed <= 1200
    acceptance_report("median final-layer AP: dense >= twice >= once - 0.01 (5 seeds, <= 20 min)", ok,
                      f"LFD {med['csa_lfd']:.4f}, LFT {med['csa_lft']:.4f}, LFO {med['csa_lfo']:.4f}, "
                      f"{elapsed:.0f} s")
    assert ok


def test_overfit_single_scene(acceptance_report):
    scene = micro_scene()
    config = TrainConfig(epochs=200, num_train=1, num_val=1)
    start = time.perf_counter()
    rows = train(config, [scene], [scene], evaluate_every=1).rows
    elapsed = time.perf_counter() - start
    first = next((r.epoch for r in rows if r.AP50 == 1.0), None)
    ok = first is not None and elapsed < 60
    acceptance_report("single-scene CSA training reaches AP50 = 1.0 within 200 epochs, < 1 min", ok,
                      f"epoch-1 AP50 {rows[0].AP50:.3f}, first 1.0 at epoch {first}, final AP50 {rows[-1].AP50:.3f}, {elapsed:.1f} s")
    assert ok


def test_reruns_are_byte_identical(benchmark_runs, tmp_path, acceptance_report):
    root, _ = benchmark_runs["csa_lfd"]
    run_seed(replace(TrainConfig(), seed=0), 0, tmp_path / "again")
    names = ["metrics.csv", "layer_ap.csv", "assignments.jsonl", "queries.csv"]
    same_seed = all((root / "seed_0" / n).read_bytes() == (tmp_path / "again" / n).read_bytes() for n in names)
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps({"name": "det", "output_dir": str(tmp_path / "cli"), "seeds": [0, 1],
                                    "config": {"epochs": 3, "num_train": 8, "num_val": 4},
                                    "grid": {"strategies": ["baseline", "csa"], "schemes": ["lfo", "lfd"]}}))

    def snapshot():
        return {p.relative_to(tmp_path / "cli").as_posix(): p.read_bytes()
                for p in sorted((tmp_path / "cli").rglob("*")) if p.is_file()}
    assert main(["ablate", "--grid", str(manifest)]) == 0
    first = snapshot()
    assert main(["ablate", "--grid", str(manifest)]) == 0
    same_cli = snapshot() == first and len(first) == 4 * 2 * 4 + 1
    ok = same_seed and same_cli
    acceptance_report("reruns with the same manifest give byte-identical CSV outputs", ok,
                      f"default-run seed rerun {'identical' if same_seed else 'differs'}, "
                      f"CLI grid rerun {'identical' if same_cli else 'differs'} ({len(first)} files)")
    assert ok
