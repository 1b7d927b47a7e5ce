import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mtsl.data import SyntheticTaskSpec, generate  # noqa: E402


@pytest.fixture(scope="session")
def three_task_data():
    spec = SyntheticTaskSpec.shared_and_independent(3, [1, 2])
    return generate(spec, 256, seed=3)
