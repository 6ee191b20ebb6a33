"""Shared fixtures: small fast models for most tests, plus a toy-trained
checkpoint (trained once, cached on disk) for the end-to-end suites."""

from pathlib import Path

import numpy as np
import pytest

from geodiff.diffnet import DenoiseUNet, ModelConfig

CACHE_DIR = Path(__file__).parent / ".cache"

# Small enough for finite differences, big enough to have both attention
# resolutions (8x8 and 4x4 token grids).
TINY_CONFIG = ModelConfig(
    latent_size=8,
    latent_channels=2,
    base_channels=8,
    attn_dim=8,
    text_len=2,
    text_dim=8,
)

TOY_CONFIG = ModelConfig()  # the 16x16x4 desk-scale default


@pytest.fixture(scope="session")
def tiny_model():
    model = DenoiseUNet(TINY_CONFIG, seed=1234)
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_schedule(tiny_model):
    return tiny_model.cfg.schedule()


@pytest.fixture(scope="session")
def toy_checkpoint():
    """A trained desk-scale checkpoint; trained on first use, then cached."""
    from geodiff.toytrain import cached_checkpoint

    model, schedule = cached_checkpoint(CACHE_DIR, TOY_CONFIG, seed=0,
                                        train_steps=2000)
    return model, schedule


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
