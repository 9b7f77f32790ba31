"""Shared pytest fixtures: seeded generators, tiny network configs and tiny datasets."""

import numpy as np
import pytest

from aseg import (
    EasppConfig,
    EncoderConfig,
    FusionConfig,
    InMemoryDataset,
    ModelConfig,
    SyntheticSpec,
    configure_logging,
)
from aseg.data import collate


@pytest.fixture(autouse=True)
def quiet_logging():
    """Keep console logging at warning level between tests."""
    configure_logging(level="warning", colorize=False)
    yield
    configure_logging(level="warning", colorize=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model_config_factory():
    """Networks small enough for float64 gradient work on 32×32 inputs."""

    def _build(**kwargs):
        defaults = dict(
            encoder=EncoderConfig(width_multiplier=1 / 32, units=[1, 1, 1, 1]),
            easpp=EasppConfig(dropout=0.0),
            num_classes=3,
            skip_channels=4,
        )
        defaults.update(kwargs)
        return ModelConfig(**defaults)

    return _build


@pytest.fixture
def fusion_config_factory(model_config_factory):
    def _build(**kwargs):
        defaults = dict(
            stream_a=model_config_factory(modality="a"),
            stream_b=model_config_factory(modality="b"),
            eta_enc=4,
            eta_skip=2,
        )
        defaults.update(kwargs)
        return FusionConfig(**defaults)

    return _build


@pytest.fixture
def spec_factory():
    def _build(**kwargs):
        defaults = dict(num_classes=3, height=32, width=32, val_fraction=0.25, seed=7)
        defaults.update(kwargs)
        return SyntheticSpec(**defaults)

    return _build


@pytest.fixture
def dataset_factory(spec_factory):
    """In-memory synthetic datasets (8 samples: 6 train, 2 val by default)."""

    def _build(n_samples=8, **spec_kwargs):
        return InMemoryDataset.synthesize(spec_factory(**spec_kwargs), n_samples)

    return _build


@pytest.fixture
def tiny_batch(dataset_factory):
    data = dataset_factory()
    indices = data.indices("train")[:2]
    return collate([data.sample(i) for i in indices], indices)
