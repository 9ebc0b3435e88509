from __future__ import annotations

from pathlib import Path

import pytest

from defectkit.core import CategoryRegistry, FoodType

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def two_image_path() -> Path:
    return FIXTURES / "two_images.json"


@pytest.fixture
def registry() -> CategoryRegistry:
    return CategoryRegistry.product(
        [FoodType.APPLE, FoodType.PEAR, FoodType.PLUM], ["normal", "rot", "mold", "bruise"]
    )



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
