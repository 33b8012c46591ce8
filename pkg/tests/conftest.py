import dataclasses

import numpy as np
import pytest

from crowdformer.config import ModelConfig, load_config
from crowdformer.data import gen_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config("tiny")


@pytest.fixture(scope="session")
def mini_model_cfg():
    # Smaller than the tiny profile; keeps per-test model work negligible.
    return ModelConfig(
        input_size=32,
        stage_depths=(1, 1, 1, 1),
        embed_dims=(4, 8, 12, 16),
        num_heads=(1, 2, 2, 4),
        sr_ratios=(8, 4, 2, 1),
        agg_width=8,
    )


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth") / "setA"
    gen_synthetic_dataset(root, n_images=6, count_range=(3, 30), seed=11)
    return root


@pytest.fixture
def no_aug_data_cfg(tiny_cfg):
    return dataclasses.replace(tiny_cfg.data, augment=False)
