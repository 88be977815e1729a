import os

import pandas as pd
import pytest
from pydantic import ValidationError

from src.pipeline import ablation
from src.pipeline.ablation import (
    PRESETS,
    RESULTS_FILE,
    SUMMARY_FILE,
    AblationPreset,
    Variant,
    get_preset,
    run_ablation,
    run_variant,
    summarize,
    variant_configs,
)
from src.pipeline.config import ExperimentConfig
from tests.conftest import small_config


def test_presets_cover_the_study_axes():
    assert set(PRESETS) == {
        "proposals", "update-rules", "soft-vs-hard", "ensembles",
        "beta-sweep", "localization", "hard-theta", "hard-beta",
    }
    assert [v.name for v in get_preset("update-rules").variants] == ["ema_per_iter", "copy_every_k", "fixed"]
    assert len(get_preset("beta-sweep").variants) == 8
    assert all(v.delta["train.ensemble_mode"] == "none" for v in get_preset("soft-vs-hard").variants)
    assert all(v.delta["train.label_mode"] == "hard" for v in get_preset("hard-theta").variants)
    assert get_preset("update-rules").variants[1].delta["train.copy_interval"] == ablation.TOY_COPY_INTERVAL


def test_get_preset_unknown():
    with pytest.raises(KeyError):
        get_preset("dropout")


def test_duplicate_variant_names_are_rejected():
    with pytest.raises(ValidationError):
        AblationPreset(name="p", description="d", variants=[Variant(name="a"), Variant(name="a")])


def test_variant_configs(tmp_path):
    base = ExperimentConfig()
    jobs = variant_configs(base, get_preset("update-rules"), str(tmp_path), seeds=2)
    assert len(jobs) == 6
    assert [j["split_seed"] for j in jobs] == [0, 0, 0, 1, 1, 1]
    config = ExperimentConfig.model_validate(jobs[4]["config"])
    assert config.run_name == "update-rules-copy_every_k-s1"
    assert config.train.update_rule == "copy_every_k" and config.split.seed == 1
    assert config.output_dir == str(tmp_path)


def test_summarize_means_and_failures():
    rows = [
        {"variant": "a", "split_seed": 0, "status": "ok", "baseline_map": 0.1, "teacher_map": 0.2, "student_map": 0.1},
        {"variant": "a", "split_seed": 1, "status": "ok", "baseline_map": 0.1, "teacher_map": 0.4, "student_map": 0.3},
        {"variant": "b", "split_seed": 0, "status": "failed", "error": "DataError: x"},
    ]
    summary = summarize(rows, ["a", "b"])
    assert list(summary["variant"]) == ["a", "b"]
    a = summary.iloc[0]
    assert a["teacher_map_mean"] == pytest.approx(0.3)
    assert a["runs"] == 2 and a["failed"] == 0
    assert summary.iloc[1]["failed"] == 1
    assert pd.isna(summary.iloc[1]["teacher_map_mean"])


def test_run_variant_reports_failures(tmp_path):
    config = small_config(tmp_path)
    row = run_variant({"variant": "v", "split_seed": 0, "config": config.model_dump(mode="json")})
    assert row["status"] == "failed"
    assert row["error"].startswith("DataError")


def test_run_ablation_writes_tables(tmp_path, monkeypatch):
    calls = []

    def fake_run(job):
        calls.append(job["config"]["run_name"])
        return {"variant": job["variant"], "split_seed": job["split_seed"], "status": "ok", "teacher_map": 0.5, "baseline_map": 0.25}

    monkeypatch.setattr(ablation, "run_variant", fake_run)
    out = str(tmp_path / "ablate")
    summary = run_ablation(small_config(tmp_path), "localization", out)
    assert calls == ["localization-loc_on-s0", "localization-loc_off-s0"]
    assert os.path.exists(os.path.join(out, RESULTS_FILE)) and os.path.exists(os.path.join(out, SUMMARY_FILE))
    assert list(summary["teacher_map_mean"]) == [0.5, 0.5]
    assert list(pd.read_csv(os.path.join(out, RESULTS_FILE))["variant"]) == ["loc_on", "loc_off"]
