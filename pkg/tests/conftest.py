import numpy as np
import pytest

from helpers import ACCEPTANCE_LINES, jitter_params
from mask_adapter.adapter import init_params
from mask_adapter.synthworld import generate_scene, make_category_bank


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_bank():
    return make_category_bank(6, 8, 0.5, rng=0)


@pytest.fixture
def small_scene(small_bank):
    return generate_scene(small_bank, 32, 32, 3, 0.3, rng=5)


@pytest.fixture
def small_params():
    return jitter_params(init_params(8, 2, 0), np.random.default_rng(7))
