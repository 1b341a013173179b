import json
import os
from dataclasses import replace

import pandas as pd
import pytest

from conftest import TINY_LAB, tiny_lab_dict
from main import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, EXIT_UPSTREAM, main
from src import pipeline
from src.config import ConfigError, parse_config
from src.pipeline import (
    SKIPPED,
    DigestMismatchError,
    RunLockedError,
    UpstreamMissingError,
    load_manifest,
    resolve_stages,
    run_pipeline,
)
from src.rea_theory import TheoryError

FULL_ORDER = ["gen-data", "pretrain:A", "pretrain:B", "train-corrector", "rollout", "evaluate", "spectrum", "theory-check"]


def test_stage_order_and_aliases(tiny_lab):
    assert resolve_stages(tiny_lab, None) == FULL_ORDER
    assert resolve_stages(tiny_lab, ["rollout", "pretrain", "gen-data"]) == ["gen-data", "pretrain:A", "pretrain:B", "rollout"]
    with pytest.raises(ConfigError, match="did you mean 'rollout'"):
        resolve_stages(tiny_lab, ["rolout"])


def test_disabled_corrector_drops_its_stage():
    cfg = parse_config(tiny_lab_dict(corrector={"enabled": False}))
    assert "train-corrector" not in resolve_stages(cfg, None)


def test_ablation_runs_by_default_only_when_enabled(tiny_lab):
    assert "ablation" not in resolve_stages(tiny_lab, None)
    assert resolve_stages(tiny_lab, ["ablation", "gen-data"]) == ["gen-data", "ablation"]
    enabled = parse_config(tiny_lab_dict(ablation={"enabled": True}))
    assert resolve_stages(enabled, None) == FULL_ORDER + ["ablation"]


def test_gen_data_is_skipped_when_up_to_date(tiny_lab, tmp_path):
    run_dir = str(tmp_path / "run")
    first = run_pipeline(tiny_lab, ["gen-data"], run_dir=run_dir)
    assert first.status("gen-data") == "ok"
    assert "data/world.json" in first.stages["gen-data"].artifacts
    second = run_pipeline(tiny_lab, ["gen-data"], run_dir=run_dir)
    assert second.status("gen-data") == SKIPPED
    assert not os.path.exists(os.path.join(run_dir, ".lock"))


def test_changed_world_reruns_gen_data(tiny_lab, tmp_path):
    run_dir = str(tmp_path / "run")
    run_pipeline(tiny_lab, ["gen-data"], run_dir=run_dir)
    changed = parse_config(tiny_lab_dict(world={"seed": 8}))
    assert run_pipeline(changed, ["gen-data"], run_dir=run_dir).status("gen-data") == "ok"


def test_missing_upstream_is_reported(tiny_lab, tmp_path):
    with pytest.raises(UpstreamMissingError, match="gen-data"):
        run_pipeline(tiny_lab, ["rollout"], run_dir=str(tmp_path / "run"))


def test_changed_artifact_blocks_downstream(tiny_lab, tmp_path):
    run_dir = tmp_path / "run"
    run_pipeline(tiny_lab, ["gen-data"], run_dir=str(run_dir))
    with open(run_dir / "data" / "train.bin", "ab") as f:
        f.write(b"\0\0\0\0")
    with pytest.raises(DigestMismatchError):
        run_pipeline(tiny_lab, ["pretrain:A"], run_dir=str(run_dir))


def test_locked_run_directory(tiny_lab, tmp_path):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    (run_dir / ".lock").write_text("12345")
    with pytest.raises(RunLockedError):
        run_pipeline(tiny_lab, ["theory-check"], run_dir=str(run_dir))
    assert (run_dir / ".lock").exists()


def test_theory_check_runs_without_upstream(tiny_lab, tmp_path):
    run_dir = tmp_path / "run"
    manifest = run_pipeline(tiny_lab, ["theory-check"], run_dir=str(run_dir))
    assert manifest.status("theory-check") == "ok"
    report = json.loads((run_dir / "theory_report.json").read_text())
    assert report["violation_count"] == 0 and report["horizon"] == 10
    assert "neural" not in report


def test_failed_stage_is_recorded(tmp_path):
    cfg = parse_config(tiny_lab_dict(theory={"horizon": 0}))
    run_dir = str(tmp_path / "run")
    with pytest.raises(TheoryError):
        run_pipeline(cfg, ["theory-check"], run_dir=run_dir)
    record = load_manifest(run_dir).stages["theory-check"]
    assert record.status == "failed"
    assert record.message.startswith("TheoryError")
    assert not os.path.exists(os.path.join(run_dir, ".lock"))


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_LAB), encoding="utf-8")
    return str(path)


def test_cli_exit_codes(tiny_config_file, tmp_path):
    runs = str(tmp_path / "runs")
    assert main(["theory-check", "--config", tiny_config_file, "--runs-dir", runs]) == EXIT_OK
    assert os.path.exists(os.path.join(runs, "tiny", "theory_report.json"))
    assert main(["rollout", "--config", tiny_config_file, "--runs-dir", runs]) == EXIT_UPSTREAM
    assert main(["evaluate", "--config", tiny_config_file, "--runs-dir", runs, "--set", "rollout.horizn=3"]) == EXIT_CONFIG
    assert main(["pipeline", "--config", tiny_config_file, "--runs-dir", runs, "--stages", "gen-dat"]) == EXIT_CONFIG



def test_cli_exits_with_divergence_code(tiny_config_file, tmp_path, monkeypatch):
    runs = str(tmp_path / "runs")
    assert main(["gen-data", "--config", tiny_config_file, "--runs-dir", runs]) == EXIT_OK
    build = pipeline.build_engine_dataset

    def exploding(world, spec):
        data = build(world, spec)
        return replace(data, train_inputs=data.train_inputs * 1e200, train_targets=data.train_targets * 1e200)

    monkeypatch.setattr(pipeline, "build_engine_dataset", exploding)
    assert main(["pretrain", "--engine", "A", "--config", tiny_config_file, "--runs-dir", runs]) == EXIT_DIVERGED
    assert load_manifest(os.path.join(runs, "tiny")).stages["pretrain:A"].status == "failed"

@pytest.mark.slow
def test_full_pipeline_on_tiny_lab(tiny_lab, tmp_path):
    run_dir = tmp_path / "run"
    manifest = run_pipeline(tiny_lab, run_dir=str(run_dir))
    assert [manifest.status(s) for s in FULL_ORDER] == ["ok"] * len(FULL_ORDER)
    for series in ("coupled", "uncorrected", "truth-boundary"):
        for ic in range(2):
            assert (run_dir / "traces" / series / f"ic{ic:03d}.json").exists()

    metrics = pd.read_csv(run_dir / "metrics.csv")
    assert set(metrics["series"]) == {"coupled", "uncorrected", "truth-boundary"}
    assert len(metrics) == 3 * 5 * 4
    summary = json.loads((run_dir / "summary.json").read_text())
    assert "relative_improvement" in summary
    assert set(summary["series"]) == {"coupled", "uncorrected", "truth-boundary"}
    spectrum = json.loads((run_dir / "spectrum_summary.json").read_text())
    assert spectrum["lead"] == 2
    assert spectrum["power_law_check"]["target"] == -3.0
    assert spectrum["power_law_check"]["passed"] is True
    assert set(spectrum["log_spectral_gap"]) == {"coupled", "uncorrected", "truth-boundary"}

    again = run_pipeline(tiny_lab, run_dir=str(run_dir))
    assert [again.status(s) for s in FULL_ORDER] == [SKIPPED] * len(FULL_ORDER)


@pytest.mark.slow
def test_cli_pipeline_without_corrector(tiny_config_file, tmp_path):
    runs = str(tmp_path / "runs")
    code = main(["pipeline", "--config", tiny_config_file, "--runs-dir", runs,
                 "--stages", "gen-data,pretrain,rollout,evaluate", "--set", "corrector.enabled=false"])
    assert code == EXIT_OK
    manifest = load_manifest(os.path.join(runs, "tiny"))
    assert "train-corrector" not in manifest.stages
    assert not os.path.exists(os.path.join(runs, "tiny", "traces", "coupled"))


@pytest.mark.slow
def test_ablation_stage_compares_variants_and_cost(tmp_path):
    cfg = parse_config(tiny_lab_dict(ablation={"enabled": True}))
    run_dir = tmp_path / "run"
    manifest = run_pipeline(cfg, run_dir=str(run_dir))
    assert manifest.status("ablation") == "ok"

    table = pd.read_csv(run_dir / "ablation.csv").set_index("variant")
    assert list(table.index) == ["full", "no-dsl", "no-agb", "no-corrector", "corrector"]
    assert set(table.loc[["full", "no-dsl", "no-agb"], "scope"]) == {"B"}
    assert set(table.loc[["no-corrector", "corrector"], "scope"]) == {"joint"}
    assert (table["lead"] == 3).all()
    assert (table["rmse"] > 0).all() and (table["mae"] > 0).all()
    assert (table["rmse"] >= table["mae"]).all()
    params = table["params"]
    assert params["full"] > params["no-dsl"] and params["full"] > params["no-agb"]
    assert params["corrector"] > params["no-corrector"]
    assert (table["macs"] > 0).all()

    summary = json.loads((run_dir / "summary.json").read_text())
    cost = summary["model_cost"]
    assert set(cost) == {"A", "B", "corrector"}
    assert cost["B"]["params"] == params["full"]
    assert params["no-corrector"] == cost["A"]["params"] + cost["B"]["params"]
