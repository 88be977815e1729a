import json
import os

import pytest

from src.pipeline.config import (
    DEFAULT_CONFIG_PATH,
    ConfigError,
    ExperimentConfig,
    config_schema,
    dotted_to_nested,
    load_config,
    with_overrides,
    write_resolved,
)


def test_defaults():
    config = load_config(use_env=False)
    assert config.train.label_mode == "soft"
    assert config.train.update_rule == "ema_per_iter"
    assert config.train.alpha == 0.999
    assert config.train.n_proposals == 640
    assert config.train.effective_beta == 0.5
    assert config.scene.num_classes == 3
    assert config.detector_spec().num_classes == 3
    assert config.run_dir == os.path.join("runs", "default")


def test_effective_beta_follows_label_mode():
    hard = load_config(overrides={"train.label_mode": "hard"}, use_env=False)
    assert hard.train.effective_beta == 0.1
    assert hard.resolved()["train"]["beta"] == 0.1
    explicit = load_config(overrides={"train.label_mode": "hard", "train.beta": 0.3}, use_env=False)
    assert explicit.train.effective_beta == 0.3


def test_default_file_matches_built_in_defaults():
    assert load_config(DEFAULT_CONFIG_PATH, use_env=False).resolved() == ExperimentConfig().resolved()


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        load_config(overrides={"train.temperature": 2.0}, use_env=False)
    with pytest.raises(ConfigError):
        load_config(overrides={"extras": {}}, use_env=False)


@pytest.mark.parametrize(
    "delta",
    [
        {"train.alpha": 1.5},
        {"train.theta": 0.0},
        {"train.label_mode": "fuzzy"},
        {"train.ensemble_mode": "vote"},
        {"scene.image_size": 60},
        {"run_name": "a/b"},
    ],
)
def test_invalid_values_raise_config_error(delta):
    with pytest.raises(ConfigError):
        load_config(overrides=delta, use_env=False)


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("HUMBLE_TRAIN__BETA", "0.25")
    monkeypatch.setenv("HUMBLE_RUN_NAME", "from-env")
    monkeypatch.setenv("HUMBLE_TRAIN__LABEL_MODE", "hard")
    config = load_config()
    assert config.train.beta == 0.25
    assert config.train.label_mode == "hard"
    assert config.run_name == "from-env"
    assert load_config(use_env=False).run_name == "default"


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "absent.json"), use_env=False)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(bad), use_env=False)
    listy = tmp_path / "list.json"
    listy.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(str(listy), use_env=False)


def test_file_values_then_overrides(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"run_name": "exp", "train": {"beta": 0.2, "total_iters": 10}}))
    config = load_config(str(path), overrides={"train.total_iters": 5}, use_env=False)
    assert config.run_name == "exp"
    assert config.train.beta == 0.2 and config.train.total_iters == 5


def test_with_overrides_revalidates():
    config = ExperimentConfig()
    changed = with_overrides(config, {"train.update_rule": "fixed", "split.labeled_fraction": 0.5})
    assert changed.train.update_rule == "fixed" and changed.split.labeled_fraction == 0.5
    assert config.train.update_rule == "ema_per_iter"
    with pytest.raises(ConfigError):
        with_overrides(config, {"split.labeled_fraction": 0.0})


def test_dotted_to_nested():
    assert dotted_to_nested({"train.beta": 0.3, "run_name": "x"}) == {"train": {"beta": 0.3}, "run_name": "x"}


def test_write_resolved(tmp_path):
    path = write_resolved(ExperimentConfig(), str(tmp_path / "run"))
    with open(path) as f:
        document = json.load(f)
    assert document["train"]["beta"] == 0.5
    assert ExperimentConfig.model_validate(document).train.beta == 0.5


def test_schema_lists_sections():
    schema = config_schema()
    assert {"scene", "corpus", "split", "model", "train"} <= set(schema["properties"])
