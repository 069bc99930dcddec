import numpy as np
import pytest

from gengap.registry import Registry, synth_all
from gengap.scene import Condition

DB_SEED = 7

_acceptance_lines = []


@pytest.fixture(scope="session")
def db_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("dbs")
    synth_all(root, DB_SEED)
    return root


@pytest.fixture(scope="session")
def registry(db_root):
    return Registry.load(db_root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def train_condition():
    return Condition.from_indices([1], [1], [1], "train")


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return _acceptance_lines


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
