import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_binary():
    """A small DGD 1 sample used by several modules."""
    from haldose.dgd import generate

    return generate(1, 300, 7)
