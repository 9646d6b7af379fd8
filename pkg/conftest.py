import numpy as np
import pytest

from models.ar_generator import ARConfig
from models.synthetic_data import SyntheticDataset, SyntheticSpec
from models.tokenizer import TokConfig


def pytest_addoption(parser):
    parser.addoption("--slow", action="store_true", default=False, help="run training-budget tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def philox(seed):
    return np.random.Generator(np.random.Philox(seed))


def randomize_parameters(named, seed, std=0.3):
    """Overwrite every parameter with N(0, std) draws so gradient checks are well conditioned."""
    rng = philox(seed)
    for name in sorted(named):
        tensor = named[name]
        tensor.data = rng.normal(0.0, std, tensor.shape).astype(tensor.data.dtype)


@pytest.fixture
def rng():
    return philox(1234)


@pytest.fixture
def micro_tok_cfg():
    """8x8 images, 2x2 patch grid, float64."""
    return TokConfig(
        image_h=8, image_w=8, f=4, codebook_size=8, d_c=4, width=8, heads=2,
        enc_depth=1, dec_depth=1, dec2_depth=1, mlp_ratio=2.0, buffer_count=2, dtype="F64",
    )


@pytest.fixture
def small_ar_cfg():
    return ARConfig(vocab=16, classes=4, K=4, H=4, W=4, width=32, heads=2, depth=2)


@pytest.fixture
def micro_spec():
    return SyntheticSpec(classes=2, images_per_class=6, eval_per_class=2, image_h=8, image_w=8)


@pytest.fixture
def micro_dataset(micro_spec):
    return SyntheticDataset(micro_spec)
