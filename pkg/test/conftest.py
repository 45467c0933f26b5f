import numpy as np
import pytest

from create_testdata import TINY_MODEL, generate_test_data

from app.config import ModelConfig
from app.model import init_params
from app.vocab import build_vocab


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    """Keeps log files and .env lookups inside the test's temporary directory."""
    monkeypatch.setenv("GANLM_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("GANLM_CHECKED", "0")
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def testdata(tmp_path):
    return generate_test_data(str(tmp_path / "data"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_vocab():
    return build_vocab(["a b c d e f g"])


@pytest.fixture
def tiny_config(small_vocab):
    return ModelConfig(vocab_size=len(small_vocab), **TINY_MODEL)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=0)
