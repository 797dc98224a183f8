from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def networks_dir():
    return ROOT / "configs" / "networks"


@pytest.fixture
def fixtures_dir():
    return Path(__file__).parent / "fixtures"
