# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""Fixture condivise: dataset sintetici piccoli a seed fisso."""

import numpy as np
import pytest

from stepembed.data.synthetic import generate_synthetic


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="esegui anche le riproduzioni lente")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: riproduzione direzionale lenta (richiede --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="richiede --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _isolated_logs(tmp_path, monkeypatch):
    monkeypatch.setenv("STEPEMBED_LOG_DIR", str(tmp_path / "logs"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_binary():
    """40 soggiorni, T=8, 2 gruppi × 3 feature, task online_binary."""
    dataset, scheme = generate_synthetic(seed=7, n_stays=40, T=8, K=2, feats_per_group=3,
                                         missing_rate=0.2, task="online_binary")
    return dataset, scheme


@pytest.fixture
def tiny_per_stay():
    dataset, scheme = generate_synthetic(seed=3, n_stays=30, T=6, K=2, feats_per_group=2,
                                         missing_rate=0.1, task="per_stay_binary")
    return dataset, scheme


@pytest.fixture
def tiny_multiclass():
    dataset, scheme = generate_synthetic(seed=5, n_stays=30, T=6, K=3, feats_per_group=2,
                                         missing_rate=0.1, task="multiclass")
    return dataset, scheme


@pytest.fixture
def tiny_regression():
    dataset, scheme = generate_synthetic(seed=11, n_stays=30, T=10, K=2, feats_per_group=2,
                                         missing_rate=0.1, task="regression", min_T=4)
    return dataset, scheme
