import numpy as np
import pytest

from a2s.schemas.config import ArchConfig, ExperimentConfig, TrainConfig
from a2s.synthdata import generate_corpus, generate_piece, pairs_from_pieces, render_aligned_piece


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or trend checks")


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    """Keep dataset caches and the run ledger inside the test's tmp dir"""
    monkeypatch.setenv("A2S_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setattr("a2s.settings.DATABASE_URL", f"sqlite:///{tmp_path / 'ledger.db'}")


@pytest.fixture
def small_piece():
    return render_aligned_piece(generate_piece(7, 8, (55, 75)))


@pytest.fixture(scope="session")
def corpus_pieces():
    return generate_corpus(3, 5, 8, (55, 75), tempo_range=(0.8, 1.25), tempo_points=3)


@pytest.fixture(scope="session")
def short_pairs(corpus_pieces):
    return pairs_from_pieces(corpus_pieces, "short")


@pytest.fixture
def arch():
    return ArchConfig()


@pytest.fixture
def quick_train():
    return TrainConfig(batch_size=8, epochs=1, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_experiment(tmp_path):
    return ExperimentConfig.model_validate({
        "data": {"n_train_pieces": 3, "n_test_pieces": 2, "notes_per_piece": 8, "pretrain_pool": 8},
        "train": {"batch_size": 8, "epochs": 1},
        "pretrain": {"batch_size": 4, "epochs": 1},
        "eval": {"pool_size": 16},
        "pieceid": {"n_pieces": 2, "notes_per_piece": 8},
        "seeds": [1],
        "out_dir": str(tmp_path / "runs"),
    })
