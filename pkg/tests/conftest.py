from pathlib import Path

import pytest

from dualguide.experiments import ToyShape

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def denoiser():
    return ToyShape().build()


@pytest.fixture(scope="session")
def data_dir():
    return DATA
