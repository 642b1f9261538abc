"""
Shared fixtures: a micro configuration, a small synthetic dataset and a detector
"""

import numpy as np
import pytest

from src import autodiff as ad
from src import alignment
from src.config import ExperimentConfig
from src.datagen import MODALITIES, generate_dataset, make_batch
from src.training import ViolenceDetector


def micro_config(seed: int = 0, n_bags: int = 8) -> ExperimentConfig:
    """Few dims, short bags; every component still has its full structure"""
    config = ExperimentConfig()
    config.gen.n_bags, config.gen.t_min, config.gen.t_max = n_bags, 32, 40
    config.gen.rgb_dim, config.gen.audio_dim, config.gen.flow_dim = 24, 8, 16
    config.gen.rgb_signal_dims, config.gen.audio_signal_dims, config.gen.flow_signal_dims = 12, 4, 8
    config.gen.latent_dim, config.gen.segment_max = 4, 16
    config.gen.seed = seed
    config.encoder.d_rgb, config.encoder.d_flow, config.encoder.d_audio = 16, 8, 4
    config.encoder.heads, config.encoder.layers, config.encoder.local_window = 2, 1, 5
    config.encoder.ffn_multiplier = 2
    config.fusion.hidden_dim, config.fusion.out_dim = 16, 8
    config.train.batch_size, config.train.t_train, config.train.seed = 4, 32, seed
    config.train.iterations, config.train.window, config.train.eval_every = 3, 5, 0
    return config.validate()


@pytest.fixture(autouse=True)
def reset_global_state():
    """Tests may switch dtype or count searches; start each from the defaults"""
    ad.set_default_dtype("float64")
    alignment.SEARCH_CALLS = 0
    yield
    ad.set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def config():
    return micro_config()


@pytest.fixture
def bags(config):
    return generate_dataset(config.gen)


@pytest.fixture
def raw_dims(bags):
    return {m: bags[0].sequence(m).D for m in MODALITIES}


@pytest.fixture
def detector(config, raw_dims):
    return ViolenceDetector(raw_dims, config.encoder, config.fusion, seed=0)


@pytest.fixture
def batch(bags, config):
    return make_batch(bags, config.train.t_train, seed=0, batch_size=config.train.batch_size)
