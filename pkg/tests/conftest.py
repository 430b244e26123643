"""
Shared fixtures: seeded generators, small model configs and an on-disk
synthetic dataset.
"""

import copy
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT_DIR = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT_DIR))

from src.config import (  # noqa: E402
    EncoderConfig,
    ModelConfig,
    RunConfig,
    SapConfig,
    SynthConfig,
    load_run_config,
)
from src.synthetic import gen_synthetic  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(params=[0, 1, 2, 3, 4])
def seed(request):
    """Five seeds for the gradient suite."""
    return request.param


def _tiny_model_config(**overrides) -> ModelConfig:
    config = ModelConfig(
        encoder=EncoderConfig(
            stage_channels=(2, 4, 8, 16),
            stage_strides=(2, 4, 8, 16),
            blocks_per_stage=(1, 1, 1, 1),
        ),
        sap=SapConfig(pool_count=1),
        fusion_width=4,
        num_classes=3,
    )
    for key, value in overrides.items():
        section, _, name = key.rpartition("__")
        target = getattr(config, section) if section else config
        setattr(target, name, value)
    return config


@pytest.fixture
def tiny_config():
    """Factory for a 2,4,8,16-stride network small enough for finite differences.

    Nested fields are overridden with `sap__pool_count=2` style keywords.
    """
    return _tiny_model_config


@pytest.fixture
def micro_run() -> RunConfig:
    return load_run_config(preset="micro")


@pytest.fixture
def small_run(micro_run) -> RunConfig:
    """Micro preset shrunk to a few short steps on 8 samples."""
    run = copy.deepcopy(micro_run)
    run.synth = SynthConfig(num_samples=8, height=64, width=64, num_classes=3, seed=7, val_fraction=0.25)
    run.train.batch_size = 2
    run.train.max_steps = 3
    return run.validate()


@pytest.fixture
def synthetic_dir(tmp_path, small_run) -> Path:
    out = tmp_path / "data"
    gen_synthetic(small_run.synth, out)
    return out
