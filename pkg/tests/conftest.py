import numpy as np
import pytest

from hmi import plot
from hmi.cli import synthetic_corpus
from hmi.transformer import ModelConfig, generate_model

SMALL = dict(hidden_size=8, heads=2, lower_layers=2, higher_layers=2, ffn_size=16, vocab_size=64,
             adapter_bottleneck=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_model():
    return generate_model(ModelConfig(**SMALL, seed=3))


@pytest.fixture(scope="session")
def small_causal_model():
    return generate_model(ModelConfig(**SMALL, mode="causal", seed=4))


@pytest.fixture(scope="session")
def desk_model():
    return generate_model(ModelConfig())


@pytest.fixture(scope="session")
def small_root(small_model):
    corpus = synthetic_corpus(64, 40, 12, seed=5)
    return plot.build_root(corpus, small_model)


@pytest.fixture(scope="session")
def desk_root(desk_model):
    return plot.build_root(synthetic_corpus(1024, 200, 24, seed=0), desk_model)
