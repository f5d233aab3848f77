import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nightlift import backend  # noqa: E402


@pytest.fixture(params=sorted(backend.BACKENDS))
def impl(request):
    """Run a test once per available filter backend."""
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
