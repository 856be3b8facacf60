"""Shared fixtures: tiny model configs and a small synthetic corpus."""

import numpy as np
import pytest

from camds.model import ModelConfig
from camds.synthetic import SyntheticSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Factory for small models that run in milliseconds."""

    def make(head="cam-ds", **overrides):
        values = dict(
            input_size=16,
            num_resolutions=2,
            channels_per_stage=(4, 6),
            blocks_per_stage=1,
            head=head,
            seed=0,
            fc_hidden=8,
        )
        values.update(overrides)
        return ModelConfig(**values)

    return make


@pytest.fixture
def toy_spec():
    return SyntheticSpec(
        patients_per_class=3,
        frames_per_patient=(2, 3),
        image_size=16,
        region_size=8,
        stroke_steps=10,
        seed=7,
    )


@pytest.fixture
def toy_corpus(tmp_path, toy_spec):
    return generate_synthetic(toy_spec, tmp_path / "corpus")
