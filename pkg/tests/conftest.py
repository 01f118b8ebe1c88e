import numpy as np
import pytest

from elemseg.model import ModelConfig
from elemseg.screens import GeneratorSpec, generate_dataset

# Small-screen generator settings used across tests: 48px screens on a 2x2
# grid keep rendering valid (labels still fit) while making training cheap.
TINY_SPEC = dict(seed=11, image_size=48, grid_rows=2, grid_cols=2,
                 min_elements=3, max_elements=4, expressions_per_screen=2)

TINY_MODEL = dict(height=48, width=48, stride=4, d_text=16, d_embed=16,
                  d_img=8, backbone_channels=(6, 8), fusion_channels=8,
                  element_hidden=12, seed=3)


@pytest.fixture(scope="session")
def tiny_spec():
    return GeneratorSpec(**TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec, tmp_path_factory):
    out = tmp_path_factory.mktemp("tinydata")
    counts = generate_dataset(tiny_spec, 12, out)
    assert counts["train"] > 0 and counts["val"] > 0 and counts["test"] > 0
    return out


@pytest.fixture()
def tiny_model_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
