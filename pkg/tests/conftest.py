import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from featureflow.config_io import make_synthetic_dataset  # noqa: E402


@pytest.fixture
def toy_data():
    return make_synthetic_dataset(4, 3, 0)
