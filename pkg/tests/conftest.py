# NOTE: this is where we put all of global configurations, fixtures, etc
from pathlib import Path
from typing import Tuple

import numpy as np
import pytest

from fedvit.config import DataConfig, RunConfig
from fedvit.crypto import SecretKey, keygen
from fedvit.model import ModelConfig, ModelParams, Sample, init_params
from fedvit.numerics import Rng, zeros


def read_netpbm(path: Path) -> Tuple[str, np.ndarray]:
    """
    Minimal reader for the binary PPM/PGM files written by write_image.
    :return: (magic, H×W×C uint8 array)
    """
    data = path.read_bytes()
    magic, dims, maxval, payload = data.split(b"\n", 3)
    width, height = (int(v) for v in dims.split())
    assert maxval == b"255"
    channels = 3 if magic == b"P6" else 1
    pixels = np.frombuffer(payload, dtype=np.uint8)
    return magic.decode(), pixels.reshape(height, width, channels)


def zero_params(cfg: ModelConfig, *, encrypted: bool = False) -> ModelParams:
    values = {
        name: zeros(rows, cols) for name, (rows, cols) in cfg.shapes().items()
    }
    return ModelParams(**values, encrypted=encrypted)


@pytest.fixture()
def small_cfg() -> ModelConfig:
    return ModelConfig(
        image_h=8,
        image_w=8,
        channels=3,
        patch_size=4,
        embed_dim=8,
        num_classes=3,
        hidden_dim=16,
    )


@pytest.fixture()
def default_cfg() -> ModelConfig:
    return ModelConfig()


@pytest.fixture()
def small_params(small_cfg: ModelConfig) -> ModelParams:
    return init_params(small_cfg, Rng(11, "model/init"))


@pytest.fixture()
def small_key(small_cfg: ModelConfig) -> SecretKey:
    return keygen(5, small_cfg.patch_dim, small_cfg.num_patches)


@pytest.fixture()
def default_key(default_cfg: ModelConfig) -> SecretKey:
    return keygen(42, default_cfg.patch_dim, default_cfg.num_patches)


def random_sample(cfg: ModelConfig, seed: int, label: int = 0) -> Sample:
    generator = Rng(seed, "test/sample").generator
    return Sample(generator.random(cfg.image_shape), label)


@pytest.fixture()
def small_sample(small_cfg: ModelConfig) -> Sample:
    return random_sample(small_cfg, 3, label=1)


@pytest.fixture()
def tiny_run() -> RunConfig:
    """A run that finishes in well under a second."""
    return RunConfig(
        clients=2,
        rounds=2,
        lr=0.5,
        seed=9,
        model=ModelConfig(
            image_h=8,
            image_w=8,
            channels=3,
            patch_size=4,
            embed_dim=8,
            num_classes=3,
            hidden_dim=16,
        ),
        data=DataConfig(train_size=24, test_size=12),
    )
