import numpy as np
import pytest

from spectok.model import ModelConfig, SpecConfig


def small_config(**kw):
    base = dict(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2, in_chans=1,
                layerscale_init=1.0, init_std=0.3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def images(rng):
    return rng.normal(size=(16, 1, 8, 8))


__all__ = ["small_config", "SpecConfig"]
