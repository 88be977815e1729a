import numpy as np
import pytest

from src.detection.detector import GroundTruth, init_detector
from src.pipeline.config import CorpusConfig, with_overrides
from src.pipeline.data import build_corpus
from src.pipeline.verify import tiny_config, tiny_spec


def small_config(tmp_path, **train):
    """Tiny detector and scenes, writing under ``tmp_path``."""
    delta = {
        "output_dir": str(tmp_path / "runs"),
        "corpus.path": str(tmp_path / "corpus"),
        "train.burn_in_iters": 1,
        "train.total_iters": 2,
        "train.eval_interval": 100,
        "train.checkpoint_interval": 100,
        "train.unlabeled_eval_size": 2,
    }
    delta.update({f"train.{k}": v for k, v in train.items()})
    return with_overrides(tiny_config(), delta)


@pytest.fixture
def spec():
    return tiny_spec()


@pytest.fixture
def detector(spec):
    return init_detector(spec, seed=0)


@pytest.fixture
def image():
    return np.random.default_rng(0).uniform(0, 255, size=(32, 32, 3))


@pytest.fixture
def gt():
    return GroundTruth(np.array([[3.0, 4.0, 17.0, 16.0], [14.0, 12.0, 29.0, 30.0]]), np.array([0, 1]))


@pytest.fixture(scope="session")
def corpus():
    config = tiny_config()
    return build_corpus(CorpusConfig(n_train=12, n_eval=4, seed=0), config.scene)
