import numpy as np
import pytest

from tprf.model import ModelConfig, init_params
from tprf.store import SyntheticConfig, generate_synthetic, split_synthetic_queries

# The pinned desk-scale corpus: 8 clusters x 100 passages, dim 64.
PINNED = SyntheticConfig(8, 100, 5, 64, 0.3, 0.6, 7)


@pytest.fixture(scope="session")
def pinned():
    return generate_synthetic(PINNED)


@pytest.fixture(scope="session")
def pinned_split():
    """Same corpus as ``pinned`` with 100 queries per cluster: 75 train / 25 validation."""
    corpus, queries, qrels = generate_synthetic(
        SyntheticConfig(8, 100, 5, 64, 0.3, 0.6, 7, queries_per_cluster=100)
    )
    train_q, train_qrels, val_q, val_qrels = split_synthetic_queries(queries, qrels, 25)
    return corpus, train_q, train_qrels, val_q, val_qrels


@pytest.fixture
def tiny_config():
    return ModelConfig(layers=1, heads=2, model_dim=8, ffn_dim=16, dropout=0.0)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
