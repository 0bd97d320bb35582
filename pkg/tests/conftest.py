import numpy as np
import pytest

from ssc.model import InteractionModel, ModelConfig
from ssc.synth import GenConfig, gen_dataset


def tiny_gen_config(**overrides):
    base = dict(seed=3, num_images=40, s=6, n=4, d_ho=10, d_part=5,
                map_channels=6, map_h=3, map_w=3, deform_dim=7,
                signal_to_noise=2.0, pair_signal=0.8, test_fraction=0.25)
    base.update(overrides)
    return GenConfig(**base)


def tiny_model_config(variant="ssc", **overrides):
    base = dict(variant=variant, s=6, d_ho=10, c_z=8, c_prime=8, h1=16, h2=12,
                d_part=5, bodypart_out=9, map_channels=6,
                extra_sources={"deformation": 7}, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return gen_dataset(tiny_gen_config())


@pytest.fixture()
def tiny_model():
    return InteractionModel(tiny_model_config())


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
