import numpy as np
import pytest

from emosense.config import Config
from emosense.etl import ObjectStore
from emosense.sensors import DEFAULT_REGIMES, generate_corpus


@pytest.fixture
def store(tmp_path):
    return ObjectStore(tmp_path / "store")


@pytest.fixture
def small_corpus():
    """Balanced 300-record corpus, deterministic."""
    return generate_corpus(list(DEFAULT_REGIMES.values()), "p1", per_class=100, seed=7)


@pytest.fixture
def quick_config(tmp_path):
    """Config tuned for fast tests: tiny sensing tick, small flushes."""
    return Config(
        store_root=str(tmp_path / "data"),
        session_tick_s=0.01,
        flush_rows=100,
        flush_interval_s=60.0,
        seed=11,
    )


@pytest.fixture
def toy_clusters():
    """Three linearly separable clusters, 10 points each."""
    rng = np.random.default_rng(3)
    centers = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)]
    X = np.vstack([rng.normal(c, 0.3, size=(10, 2)) for c in centers])
    y = np.repeat([0, 1, 2], 10)
    return X, y
