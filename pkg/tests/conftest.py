import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from promptseed.backend import ToyEncoder  # noqa: E402
from promptseed.evalio import default_registry  # noqa: E402


@pytest.fixture(scope="session")
def encoder():
    return ToyEncoder()


@pytest.fixture(scope="session")
def registry():
    return default_registry(3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
