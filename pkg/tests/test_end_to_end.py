"""
Directional experiments on the synthetic corpus at toy scale.

Deselected by default; run with ``pytest -m slow``.
"""
import numpy as np
import pytest

from src.pipeline.config import load_config, with_overrides
from src.pipeline.data import build_corpus
from src.pipeline.trainer import run_training

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
TOY = {
    "corpus.n_train": 400,
    "corpus.n_eval": 100,
    "split.labeled_fraction": 0.1,
    "train.burn_in_iters": 200,
    "train.total_iters": 400,
    "train.n_proposals": 64,
    "train.eval_interval": 400,
    "train.checkpoint_interval": 400,
    "train.unlabeled_eval_size": 20,
}


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    config = with_overrides(load_config(use_env=False), {**TOY, "output_dir": str(root / "runs")})
    return config, build_corpus(config.corpus, config.scene)


def _run(config, corpus, seed, **delta):
    name = "-".join([f"s{seed}", *(f"{k.split('.')[-1]}{v}" for k, v in delta.items())])
    return run_training(with_overrides(config, {"run_name": name, "split.seed": seed, **delta}), corpus)


@pytest.fixture(scope="module")
def soft_runs(toy):
    config, corpus = toy
    return {seed: _run(config, corpus, seed) for seed in SEEDS}


@pytest.mark.parametrize("seed", SEEDS)
def test_soft_labels_beat_the_supervised_baseline(soft_runs, seed):
    result = soft_runs[seed]
    assert result.final["teacher_map"] > result.baseline["teacher_map"]


@pytest.mark.parametrize("seed", SEEDS)
def test_teacher_is_at_least_as_good_as_student(soft_runs, seed):
    result = soft_runs[seed]
    assert result.final["teacher_map"] >= result.final["student_map"]


def test_ema_teacher_beats_fixed_teacher(toy, soft_runs):
    config, corpus = toy
    ema = np.mean([soft_runs[s].final["teacher_map"] for s in SEEDS])
    fixed = np.mean([_run(config, corpus, s, **{"train.update_rule": "fixed"}).final["teacher_map"] for s in SEEDS])
    assert ema >= fixed
