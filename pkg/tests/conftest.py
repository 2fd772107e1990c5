from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from crtsurv.data_model import DatasetSchema, SurvivalDataset
from crtsurv.simlab import example_dataset

ROOT = Path(__file__).resolve().parents[1]


def make_frame(seed: int = 7, n_clusters: int = 12) -> pd.DataFrame:
    """Small two-arm trial with one cluster covariate W1 and one participant covariate Z1."""
    rng = np.random.default_rng(seed)
    sizes = rng.integers(3, 9, size=n_clusters)
    cluster = np.repeat(np.arange(n_clusters), sizes)
    arm = (np.arange(n_clusters) % 2)[cluster]
    w1 = rng.binomial(1, 0.5, size=n_clusters)[cluster].astype(float)
    z1 = rng.normal(size=len(cluster))
    event_time = rng.exponential(1.0 / (0.6 * np.exp(0.5 * z1 + 0.3 * w1 - 0.4 * arm)))
    censor_time = np.minimum(rng.exponential(1.0 / (0.3 * np.exp(0.2 * z1))), 3.0)
    return pd.DataFrame(
        {
            "cluster_id": [f"k{i:02d}" for i in cluster],
            "time": np.minimum(event_time, censor_time),
            "event": (event_time <= censor_time).astype(int),
            "arm": arm,
            "W1": w1,
            "Z1": z1,
        }
    )


@pytest.fixture
def toy_frame():
    return make_frame()


@pytest.fixture
def toy(toy_frame):
    return SurvivalDataset.from_frame(toy_frame, DatasetSchema(cluster_covariates=("W1",)))


@pytest.fixture(scope="session")
def example():
    return example_dataset()


@pytest.fixture
def cache_dir(tmp_path, monkeypatch):
    path = tmp_path / "cache"
    monkeypatch.setenv("CRTSURV_CACHE_DIR", str(path))
    return path
