import numpy as np
import pytest
from hypothesis import settings

from pathassist.connector import ConnectorConfig
from pathassist.lm import LMConfig, LoraConfig
from pathassist.plip import PlipConfig
from pathassist.vlm import VLMConfig, build_vlm

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def tiny_plip(**kw) -> PlipConfig:
    base = dict(patch_size=8, enc_dim=32, enc_layers=1, heads=4, d_proj=16, crop_size=32, batch_size=4)
    base.update(kw)
    return PlipConfig(**base)


def tiny_vlm_config(seed: int = 0, tile: int = 32) -> VLMConfig:
    return VLMConfig(
        plip=tiny_plip(seed=seed),
        connector=ConnectorConfig(tile_size=tile, num_queries=4, d_llm=32, enc_dim=32, seed=seed),
        lm=LMConfig(d_model=32, layers=1, heads=4, context=256, seed=seed),
        lora=LoraConfig(r=4, alpha=8.0, seed=seed),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_vlm():
    return build_vlm(tiny_vlm_config())
