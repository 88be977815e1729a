import json
import os

import pytest

from src.autograd.tensor import NumericError
from src.detection.detector import init_detector
from src.pipeline import main as cli
from src.pipeline.data import load_corpus
from src.pipeline.verify import tiny_spec

TINY = [
    "--set", "scene.image_size=32",
    "--set", "scene.min_size=8",
    "--set", "scene.max_size=14",
    "--set", "scene.max_objects=2",
    "--set", "corpus.n_train=6",
    "--set", "corpus.n_eval=2",
]


@pytest.fixture
def corpus_dir(tmp_path):
    path = str(tmp_path / "corpus")
    assert cli.main(["gen-data", "--out", path, "--seed", "3", *TINY]) == cli.EXIT_OK
    return path


def test_schema_command(capsys):
    assert cli.main(["schema"]) == cli.EXIT_OK
    assert "train" in json.loads(capsys.readouterr().out)["properties"]


def test_verify_single_check(tmp_path):
    out = str(tmp_path / "verify")
    assert cli.main(["verify", "--check", "hard_label_filter", "--out", out]) == cli.EXIT_OK
    with open(os.path.join(out, "verify_report.json")) as f:
        assert json.load(f)["passed"] is True


def test_verify_catches_injected_gradient_fault():
    assert cli.main(["verify", "--check", "gradcheck_ops", "--inject-fault", "gradient"]) == cli.EXIT_FAILURE


def test_gen_data_writes_corpus(corpus_dir):
    corpus = load_corpus(corpus_dir)
    assert len(corpus) == 8 and corpus.images.shape[1:] == (32, 32, 3)
    assert os.path.exists(os.path.join(corpus_dir, "resolved_config.json"))


def test_gen_data_refuses_existing_corpus(corpus_dir):
    assert cli.main(["gen-data", "--out", corpus_dir, *TINY]) == cli.EXIT_DATA
    assert cli.main(["gen-data", "--out", corpus_dir, "--force", *TINY]) == cli.EXIT_OK


def test_missing_config_file_is_a_config_error(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "absent.json")]) == cli.EXIT_CONFIG


def test_malformed_override_is_a_config_error():
    assert cli.main(["train", "--set", "train.beta"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--set", "train.alpha=2"]) == cli.EXIT_CONFIG


def test_missing_corpus_is_a_data_error(tmp_path):
    code = cli.main(["train", "--out", str(tmp_path / "runs"), "--set", f"corpus.path={tmp_path / 'absent'}"])
    assert code == cli.EXIT_DATA


def test_numeric_failure_exit_code(tmp_path, corpus_dir, monkeypatch):
    def explode(*args, **kwargs):
        raise NumericError("loss is nan")

    monkeypatch.setattr(cli, "run_training", explode)
    code = cli.main(["train", "--out", str(tmp_path / "runs"), "--set", f"corpus.path={corpus_dir}", *TINY])
    assert code == cli.EXIT_NUMERIC


def test_eval_command(tmp_path, corpus_dir):
    checkpoint = str(tmp_path / "teacher.params")
    init_detector(tiny_spec(3), seed=0).save(checkpoint, {"role": "teacher", "iteration": 0})
    out = str(tmp_path / "eval")
    args = ["eval", checkpoint, "--corpus", corpus_dir, "--out", out, *TINY, "--set", "model.test_proposals=16"]
    assert cli.main(args) == cli.EXIT_OK
    with open(os.path.join(out, "eval_teacher.json")) as f:
        summary = json.load(f)
    assert summary["role"] == "teacher"
    assert 0.0 <= summary["map"] <= 1.0


def test_eval_rejects_class_mismatch(tmp_path, corpus_dir):
    checkpoint = str(tmp_path / "two.params")
    init_detector(tiny_spec(2), seed=0).save(checkpoint, {"role": "teacher"})
    assert cli.main(["eval", checkpoint, "--corpus", corpus_dir, *TINY]) == cli.EXIT_DATA
