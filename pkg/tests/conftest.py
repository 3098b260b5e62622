from __future__ import annotations

import numpy as np
import pytest
import torch

from vivat_lab.core.config import ModelConfig, RunConfig, TextureConfig, resolve_run_config
from vivat_lab.data import synth_texture

# a network small enough for gradchecks and multi-step tests on a CPU
TINY_MODEL = dict(
    base_channels=8,
    channel_multipliers=(1, 2),
    downscale_factor=2,
    latent_channels=4,
    group_norm_groups=4,
    blocks_per_level=1,
    scn_hidden_channels=8,
)

TINY_RUN = [
    "model.base_channels=8",
    "model.channel_multipliers=[1, 2]",
    "model.downscale_factor=2",
    "model.latent_channels=4",
    "model.group_norm_groups=4",
    "model.scn_hidden_channels=8",
    "train.batch_size=4",
    "train.max_steps=3",
    "train.log_every=1",
    "train.checkpoint_every=100",
    "train.discriminator.layers=1",
    "train.discriminator.base_channels=8",
    "train.perceptual.base_channels=4",
    "data.synthetic.count=16",
    "data.synthetic.size=16",
    "data.holdout=4",
    "preprocess.intermediate_short_side=16",
    "preprocess.crop_size=16",
    "eval.resolution=16",
    "detectors.corner_band=2",
]


def tiny_model_config(**overrides) -> ModelConfig:
    fields = dict(TINY_MODEL)
    fields.update(overrides)
    return ModelConfig(**fields)


def tiny_run_config(*extra: str, seed: int = 0) -> RunConfig:
    return resolve_run_config(preset="micro", overrides=TINY_RUN + list(extra), seed=seed)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def run_cfg() -> RunConfig:
    return tiny_run_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def texture() -> np.ndarray:
    return synth_texture(TextureConfig(size=64, seed=3), 0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield
