import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from helpers import write_tasks
from pathforge.cli import main
from pathforge.patch_grid import load_grid
from pathforge.synth import write_blob_slide


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


def tree_digest(root):
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(Path(root).rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_cohort")
    assert main(["synth", "--slides", "6", "--classes", "2", "--seed", "3", "--folds", "3", "--out-dir", str(root)]) == 0
    return root


def test_synth_is_reproducible(cohort, tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--slides", "6", "--classes", "2", "--seed", "3", "--folds", "3", "--out-dir", tmp_path)
    assert code == 0 and out["slides"] == 6
    assert tree_digest(tmp_path) == tree_digest(cohort)
    code, out, _ = run(capsys, "synth", "--slides", "6", "--out-dir", tmp_path)
    assert code == 0 and out["status"] == "skipped_existing"


def test_segment_and_patch_defaults(tmp_path, capsys):
    slide = tmp_path / "b.spyr"
    write_blob_slide(slide, 2, size=(1024, 768), n_levels=2, mpp=0.25)
    code, out, _ = run(capsys, "segment", slide, "--out-dir", tmp_path)
    assert code == 0 and out["regions"] >= 1
    assert (tmp_path / "masks" / "b.png").exists() and (tmp_path / "masks" / "b.geojson").exists()
    code, out, _ = run(capsys, "patch", slide, "--patch-size", 256, "--mag", 20, "--out-dir", tmp_path,
                       "--mask", tmp_path / "masks" / "b.geojson")
    assert code == 0
    grid = load_grid(tmp_path / "patches" / "b.pgrd")
    assert grid.params.patch_size == 256 and grid.params.target_magnification == 20
    assert grid.level0_patch_extent == 512 and grid.step == 512 and out["read_level"] == 1


def test_pipeline(cohort, tmp_path, capsys):
    slides = sorted((cohort / "slides").glob("*.spyr"))
    code, out, _ = run(capsys, "extract", *slides, "--workers", 2, "--out-dir", tmp_path)
    assert code == 0 and out["counts"]["done"] == 6
    code, out, _ = run(capsys, "run", "--task", cohort / "synth.yaml", "--features", tmp_path / "features",
                       "--framework", "linprobe", "--model", "stub", "--out-dir", tmp_path)
    assert code == 0 and len(out["folds"]) == 3
    assert (tmp_path / "results" / "synth__stub__linprobe.csv").exists()
    code, out, _ = run(capsys, "run", "--task", cohort / "synth.yaml", "--features", tmp_path / "features",
                       "--framework", "cox", "--out-dir", tmp_path, "--json")
    assert code == 1


def test_extract_reports_failure(tmp_path, capsys):
    bad = tmp_path / "bad.spyr"
    bad.write_bytes(b"SPYR\x01\x00\x00\x00garbage")
    code, out, _ = run(capsys, "extract", bad, "--out-dir", tmp_path)
    assert code == 2 and out["counts"]["failed"] == 1


def test_make_task(tmp_path, capsys):
    labels = tmp_path / "labels.csv"
    with open(labels, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "slide_id", "label"])
        for i in range(12):
            w.writerow([f"P{i}", f"S{i}a", "x" if i % 2 else "y"])
            w.writerow([f"P{i}", f"S{i}b", "x" if i % 2 else "y"])
    code, out, _ = run(capsys, "make-task", "--labels", labels, "--task-id", "t1", "--folds", 3, "--out-dir", tmp_path)
    assert code == 0 and out["rows"] == 24 and out["folds"] == 3
    with open(labels, "a") as fh:
        fh.write("P0,S0c,x\n")
    code, _, err = run(capsys, "make-task", "--labels", labels, "--task-id", "t2", "--out-dir", tmp_path, "--json")
    assert code == 1 and "conflicting" in json.loads(err)["message"]


def test_sweep_status_gather(tmp_path, capsys, rng):
    import numpy as np

    from pathforge.features.store import FeatureStore

    write_tasks(tmp_path / "tasks", 2, n_patients=10)
    d = tmp_path / "features" / "m1"
    d.mkdir(parents=True)
    for i in range(10):
        FeatureStore(f"P{i}", "m1", [[0, 0]], rng.normal(size=(1, 4)) + (2 if i % 2 else -2)).save(d / f"P{i}.fstr")
    (tmp_path / "sweep.yaml").write_text(
        "models: [m1]\ntasks: [tasks/task_00.yaml, tasks/task_01.yaml]\nframeworks: [linprobe, retrieval]\n"
        "hyper_grids: {retrieval: {k: [1]}}\nfeatures_dir: features\nout_dir: out\n"
        "device_slots: [{slot_id: 0, capacity: 2}]\n"
    )
    code, out, _ = run(capsys, "sweep", "--config", tmp_path / "sweep.yaml", "--max-runs", 1)
    assert code == 0 and out["counts"]["done"] == 1 and out["counts"]["pending"] == 3
    code, out, _ = run(capsys, "status", "--out-dir", tmp_path / "out")
    assert code == 0 and out["total"] == 4
    code, out, _ = run(capsys, "sweep", "--config", tmp_path / "sweep.yaml", "--workers", 2)
    assert code == 0 and out["counts"]["done"] == 4
    code, out, _ = run(capsys, "gather", "--out-dir", tmp_path / "out")
    assert code == 0
    rows = list(csv.DictReader(open(out["results"])))
    assert sum(r["fold"] == "summary" for r in rows) == 4


def test_errors_and_exit_codes(tmp_path, capsys):
    code, _, err = run(capsys, "sweep", "--config", tmp_path / "missing.yaml", "--json")
    assert code == 1
    doc = json.loads(err)
    assert doc["exit_code"] == 1 and "missing.yaml" in doc["message"]
    code, _, err = run(capsys, "frobnicate")
    assert code == 1 and "invalid choice" in err
    code, _, err = run(capsys, "status", "--out-dir", tmp_path, "--json")
    assert code == 1 and json.loads(err)["error"] == "MissingLedgerError"
    code, _, err = run(capsys, "gather", "--out-dir", tmp_path / "nothing", "--json")
    assert code == 1
    (tmp_path / "x.spyr").write_bytes(b"NOTASLIDE")
    code, _, err = run(capsys, "segment", tmp_path / "x.spyr", "--out-dir", tmp_path, "--json")
    assert code == 1 and json.loads(err)["error"] == "BadMagicError"


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "pathforge", "sweep", "--config", str(tmp_path / "none.yaml"), "--json"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 1 and json.loads(proc.stderr)["exit_code"] == 1
    assert subprocess.run([sys.executable, "-m", "pathforge", "--help"], capture_output=True).returncode == 0
