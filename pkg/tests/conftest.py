import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sine_dae.model import ModelConfig, SineDAE  # noqa: E402

TINY = ModelConfig(channels=8, kernel_len=32, stride=8, dil_kernel_len=3, dilation=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return SineDAE.initialize(TINY, 7)
