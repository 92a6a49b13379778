import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "scripts"))

from config import DataSource, ExperimentConfig  # noqa: E402
from dataio import SynthConfig  # noqa: E402
from detectors import DetectorConfig  # noqa: E402
from evitransfer import AutoencoderConfig, TrainConfig  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale end-to-end runs")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_blobs(n_per_blob=100, dim=2, offset=10.0, sigma=0.5, seed=0):
    """Two Gaussian blobs at the origin and at offset * ones; labels 0/1."""
    r = np.random.default_rng(seed)
    a = r.normal(0.0, sigma, size=(n_per_blob, dim))
    b = r.normal(offset, sigma, size=(n_per_blob, dim))
    return np.vstack([a, b]), np.repeat([0, 1], n_per_blob)


@pytest.fixture
def two_blobs():
    return make_blobs()


def small_config(tmp_path, **overrides) -> ExperimentConfig:
    """Fast synthetic experiment: small autoencoder, short training."""
    base = ExperimentConfig(
        name="test",
        seed=3,
        output_dir=tmp_path,
        data=DataSource(synth=SynthConfig(n_days=160, events_per_type=16)),
        autoencoder=AutoencoderConfig(hidden_dims=[16], latent_dim=4),
        init_training=TrainConfig(epochs=4, batch_size=64, lr=1e-2),
        transfer_training=TrainConfig(epochs=4, batch_size=64, lr=1e-2),
        detector=DetectorConfig(n_init=3),
    )
    data = base.model_dump(mode="json", by_alias=True)
    for key, value in overrides.items():
        data[key] = value
    return ExperimentConfig.model_validate(data)


@pytest.fixture
def small_config_factory(tmp_path):
    def factory(**overrides):
        return small_config(tmp_path, **overrides)
    return factory
