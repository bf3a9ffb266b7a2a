import numpy as np
import pytest

from marglik.core import RngStream
from marglik.models import Dataset, NormalNormalModel, SubjectData

from oracles import TOY_HYPER, TOY_Y

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def normal_model():
    return NormalNormalModel()


@pytest.fixture(scope="session")
def normal_data(normal_model):
    """S=20 subjects, T=10 trials, mu=0.3."""
    return normal_model.simulate([0.3], 20, 10, RngStream(1))


@pytest.fixture
def toy_model():
    return NormalNormalModel(**TOY_HYPER)


@pytest.fixture
def toy_data():
    return Dataset([SubjectData(f"s{j}", {"y": y}) for j, y in enumerate(TOY_Y)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
