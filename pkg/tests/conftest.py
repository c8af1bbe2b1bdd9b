import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from sketchstyle.arch import DiscriminatorConfig, GeneratorConfig  # noqa: E402


@pytest.fixture
def small_gen_cfg():
    return GeneratorConfig(input_size=16, base_channels=4, depth=2, mid_blocks=1, hint_dim=8)


@pytest.fixture
def small_disc_cfg():
    return DiscriminatorConfig(input_size=16, base_channels=4, head_dim=8)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
