"""
End-to-end runs of the default labs. Each trains full-size networks and takes minutes,
so every test here is marked slow.
"""
import json
import os

import pytest

from src.config import load_config
from src.pipeline import run_pipeline
from src.utils import file_digest, project_path

pytestmark = pytest.mark.slow

TRAINED_STAGES = ["gen-data", "pretrain"]
DOWNSTREAM_STAGES = ["train-corrector", "rollout", "evaluate", "spectrum"]


def _checkpoint_digests(run_dir):
    folder = os.path.join(run_dir, "checkpoints")
    return {name: file_digest(os.path.join(folder, name)) for name in sorted(os.listdir(folder))}


def _run_lab(cfg, run_dir):
    run_pipeline(cfg, TRAINED_STAGES, run_dir=run_dir)
    engine_digests = _checkpoint_digests(run_dir)
    run_pipeline(cfg, DOWNSTREAM_STAGES, run_dir=run_dir)
    return engine_digests


def _read_json(run_dir, name):
    with open(os.path.join(run_dir, name), "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    run_dir = str(tmp_path_factory.mktemp("default"))
    engine_digests = _run_lab(load_config(), run_dir)
    return run_dir, engine_digests


def test_free_running_coupling_amplifies_error(default_run):
    run_dir, _ = default_run
    summary = _read_json(run_dir, "summary.json")
    series = summary["series"]
    assert series["uncorrected"]["joint_error_lead_100"] > series["truth-boundary"]["joint_error_lead_100"]
    assert summary["rea_ratio"] >= 1.2


def test_corrector_improves_rollout_and_leaves_engines_untouched(default_run):
    run_dir, engine_digests = default_run
    summary = _read_json(run_dir, "summary.json")
    assert summary["ics"] == 20 and summary["horizon"] == 300
    assert summary["relative_improvement"] >= 0.2
    after = _checkpoint_digests(run_dir)
    assert {name: after[name] for name in engine_digests} == engine_digests


def test_corrected_spectrum_is_closer_to_truth(default_run):
    run_dir, _ = default_run
    spectrum = _read_json(run_dir, "spectrum_summary.json")
    assert spectrum["lead"] == 300
    gaps = spectrum["log_spectral_gap"]
    assert gaps["coupled"] < gaps["uncorrected"]
    assert spectrum["power_law_check"]["passed"] is True


def test_three_sphere_lab_trains_and_improves(tmp_path):
    cfg = load_config(project_path("src", "lab_config_land.json"))
    assert cfg.corrector.build(cfg.world).in_channels == 24
    run_dir = str(tmp_path / "three_sphere")
    engine_digests = _run_lab(cfg, run_dir)
    assert any(name.startswith("L.") for name in engine_digests)
    summary = _read_json(run_dir, "summary.json")
    assert summary["relative_improvement"] >= 0.1
    assert set(summary["model_cost"]) == {"A", "B", "L", "corrector"}


def _artifact_bytes(run_dir):
    out = {}
    for root, _, files in os.walk(run_dir):
        for name in files:
            if name == "manifest.json":
                continue
            path = os.path.join(root, name)
            with open(path, "rb") as f:
                out[os.path.relpath(path, run_dir)] = f.read()
    return out


def test_identical_runs_write_identical_files(tiny_lab, tmp_path):
    first, second = str(tmp_path / "first"), str(tmp_path / "second")
    for run_dir in (first, second):
        run_pipeline(tiny_lab, run_dir=run_dir)
    a, b = _artifact_bytes(first), _artifact_bytes(second)
    assert any(p.startswith("checkpoints") for p in a)
    assert any(p.startswith("traces") for p in a)
    assert "metrics.csv" in a and "extremes.csv" in a
    assert sorted(a) == sorted(b)
    assert [p for p in a if a[p] != b[p]] == []
