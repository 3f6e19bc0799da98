import pytest
import torch

from aict.config import CodecConfig


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)


def _tiny_config() -> CodecConfig:
    return CodecConfig(
        filters=(16, 24, 32, 40, 24, 24),
        depths=(1, 1, 1, 1, 1, 1, 1, 1),
        slice_count=5,
        charm_embed=32,
        scale_module_enabled=True,
        lrp_enabled=True,
    )


@pytest.fixture
def tiny_config() -> CodecConfig:
    """A config small enough for CPU unit tests; same structure as the presets."""
    return _tiny_config()
