import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mshom import grid


@pytest.fixture(scope="session")
def mesh256():
    return grid.build_fine_mesh(256)


@pytest.fixture(scope="session")
def mesh64():
    return grid.build_fine_mesh(64)


@pytest.fixture(scope="session")
def mesh32():
    return grid.build_fine_mesh(32)
