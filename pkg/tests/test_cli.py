import csv
import io
import json
import statistics

import numpy as np
import pytest

from overlapdet import assignment
from overlapdet.cli import EXIT_DIVERGED, EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, main
from overlapdet.harness import training
from overlapdet.metrics import AssignmentRecord


def test_selftest_passes(capsys):
    assert main(["selftest"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("hungarian_optimality", "gradient_check", "metric_oracles", "refinement_identities"):
        assert name in out


def test_selftest_reports_faulty_solver(monkeypatch, capsys):
    real = assignment.hungarian

    def off_by_one(cost, *a, **kw):
        result = real(cost, *a, **kw)
        c = np.asarray(cost)
        if c.shape[0] > 1 and c.shape[1] > 1:
            return assignment.Assignment([(0, 1), (1, 0)], float(c[0, 1] + c[1, 0]))
        return result
    monkeypatch.setattr(assignment, "hungarian", off_by_one)
    assert main(["selftest", "--suite", "hungarian_optimality"]) == EXIT_PROPERTY
    assert "hungarian_optimality" in capsys.readouterr().err


@pytest.mark.parametrize("scheme,layers,count", [("lfo", 3, 3), ("lft", 3, 5), ("lfd-sum-equal", 6, 21),
                                                 ("lfd-avg-diminish", 3, 6)])
def test_gradflow_counts(capsys, scheme, layers, count):
    assert main(["gradflow", "--scheme", scheme, "--layers", str(layers)]) == EXIT_OK
    captured = capsys.readouterr()
    rows = list(csv.DictReader(io.StringIO(captured.out)))
    assert len(rows) == layers * layers
    assert sum(int(r["symbolic"]) for r in rows) == count
    assert all(r["symbolic"] == r["tape"] == r["finite_difference"] for r in rows)
    assert f"{count} reachable cells" in captured.err


def test_gradflow_matrix_and_usage_errors(capsys):
    assert main(["gradflow", "--scheme", "lft", "--layers", "3", "--format", "matrix"]) == EXIT_OK
    assert capsys.readouterr().out == "layer,offset_1,offset_2,offset_3\n1,1,1,0\n2,0,1,1\n3,0,0,1\n"
    assert main(["gradflow", "--scheme", "lfz", "--layers", "3"]) == EXIT_USAGE
    assert main(["gradflow", "--scheme", "lfo", "--layers", "0"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def write_manifest(path, out, **extra):
    data = {"name": "tiny", "output_dir": str(out), "seeds": [0, 1],
            "config": {"epochs": 2, "num_train": 4, "num_val": 3}}
    data.update(extra)
    path.write_text(json.dumps(data))
    return path


def files_under(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_train_is_byte_reproducible(tmp_path):
    m = write_manifest(tmp_path / "m.json", tmp_path / "out")
    assert main(["train", "--manifest", str(m)]) == EXIT_OK
    first = files_under(tmp_path / "out")
    assert "tiny/csa__lfd-sum-equal/seed_1/metrics.csv" in first
    assert "tiny/csa__lfd-sum-equal/seed_0/assignments.jsonl" in first
    assert main(["train", "--manifest", str(m)]) == EXIT_OK
    assert files_under(tmp_path / "out") == first


def test_single_cell_grid_matches_train(tmp_path):
    m1 = write_manifest(tmp_path / "a.json", tmp_path / "a")
    m2 = write_manifest(tmp_path / "b.json", tmp_path / "b",
                        grid={"strategies": ["csa"], "schemes": ["lfd-sum-equal"]})
    assert main(["train", "--manifest", str(m1)]) == EXIT_OK
    assert main(["ablate", "--grid", str(m2)]) == EXIT_OK
    assert files_under(tmp_path / "a") == files_under(tmp_path / "b")


def test_summary_matches_independent_aggregation(tmp_path):
    m = write_manifest(tmp_path / "m.json", tmp_path / "out", seeds=[0, 1, 2],
                       grid={"strategies": ["baseline", "csa"], "schemes": ["lfo"]})
    assert main(["ablate", "--grid", str(m), "--workers", "2"]) == EXIT_OK
    root = tmp_path / "out" / "tiny"
    summary = {r["strategy"]: r for r in csv.DictReader(open(root / "summary.csv"))}
    assert set(summary) == {"baseline", "csa"}
    for strategy, row in summary.items():
        finals, fis = [], []
        for s in range(3):
            rows = list(csv.DictReader(open(root / f"{strategy}__lfo" / f"seed_{s}" / "metrics.csv")))
            finals.append(float(rows[-1]["AP"]))
            fis.append(float(rows[-1]["FIS"]))
        assert float(row["AP_median"]) == statistics.median(finals)
        assert float(row["FIS_final_median"]) == statistics.median(fis)
        assert row["seeds"] == "3" and row["failed"] == "0"


def test_output_root_env_override(tmp_path, monkeypatch):
    m = write_manifest(tmp_path / "m.json", tmp_path / "ignored", seeds=[0])
    monkeypatch.setenv("OVERLAPDET_OUTPUT_ROOT", str(tmp_path / "env"))
    assert main(["train", "--manifest", str(m)]) == EXIT_OK
    assert (tmp_path / "env" / "tiny" / "summary.csv").exists()
    assert not (tmp_path / "ignored").exists()


def test_manifest_errors(tmp_path, capsys):
    assert main(["train", "--manifest", str(tmp_path / "missing.json")]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "x", "seeds": [], "config": {}}))
    assert main(["train", "--manifest", str(bad)]) == EXIT_USAGE
    bad.write_text(json.dumps({"name": "x", "seeds": [0], "config": {"scheme": "lfq"}}))
    assert main(["ablate", "--grid", str(bad)]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_divergence_exit_code_and_marker(tmp_path, monkeypatch):
    real = training.train_step

    def poisoned(*args):
        out = real(*args)
        out.loss = float("inf")
        return out
    monkeypatch.setattr(training, "train_step", poisoned)
    m = write_manifest(tmp_path / "m.json", tmp_path / "out", seeds=[0])
    assert main(["train", "--manifest", str(m)]) == EXIT_DIVERGED
    assert (tmp_path / "out" / "tiny" / "csa__lfd-sum-equal" / "seed_0" / "FAILED").exists()
    m2 = write_manifest(tmp_path / "m2.json", tmp_path / "out2", seeds=[0],
                        grid={"strategies": ["csa"], "schemes": ["lfo", "lft"]})
    assert main(["ablate", "--grid", str(m2)]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "out2" / "tiny" / "summary.csv")))
    assert [r["failed"] for r in rows] == ["1", "1"]


def log_file(path, records):
    path.write_text("".join(r.to_json() + "\n" for r in records))
    return path


def test_analyze_logs(tmp_path, capsys):
    same = log_file(tmp_path / "same.jsonl", [AssignmentRecord(e, 0, [0, -1, 1], [2, -1, 0]) for e in (1, 2)])
    assert main(["analyze-logs", "--logs", str(same)]) == EXIT_OK
    assert capsys.readouterr().out == "epoch,IS,FCS,FOS,FIS\n2,0.0,0.0,0.0,0.0\n"
    swap = log_file(tmp_path / "swap.jsonl", [AssignmentRecord(1, 0, [0, 1, 2, -1], [7, 7, 7, -1]),
                                              AssignmentRecord(2, 0, [1, 0, 2, -1], [7, 7, 7, -1])])
    out = tmp_path / "o.csv"
    assert main(["analyze-logs", "--logs", str(swap), "--per-image", "--output", str(out)]) == EXIT_OK
    assert out.read_text() == "epoch,image_id,IS,FCS,FOS,FIS\n2,0,0.5,0,2,0.25\n"


def test_analyze_logs_errors(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["analyze-logs", "--logs", str(empty)]) == EXIT_USAGE
    one = log_file(tmp_path / "one.jsonl", [AssignmentRecord(1, 0, [0], [0])])
    assert main(["analyze-logs", "--logs", str(one)]) == EXIT_USAGE
    broken = tmp_path / "broken.jsonl"
    broken.write_text(AssignmentRecord(1, 0, [0], [0]).to_json() + "\n{oops\n")
    assert main(["analyze-logs", "--logs", str(broken)]) == EXIT_USAGE
    assert "line 2" in capsys.readouterr().err
    assert main(["analyze-logs", "--logs", str(tmp_path / "nope.jsonl")]) == EXIT_USAGE
