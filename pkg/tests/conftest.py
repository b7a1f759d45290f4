import numpy as np
import pytest

from igns import datagen


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_mass_spring(tmp_path_factory):
    """16-node mass-spring dataset used by training smoke tests."""
    out = tmp_path_factory.mktemp("ms") / "ds"
    return datagen.generate_dataset("mass_spring_lattice", 10, 3, out, rows=4, cols=4, horizon=12)


@pytest.fixture(scope="session")
def tiny_wave(tmp_path_factory):
    out = tmp_path_factory.mktemp("wave") / "ds"
    return datagen.generate_dataset("wave_balls_mini", 6, 2, out, rows=6, cols=6, horizon=8)


_CRITERIA = []


@pytest.fixture
def criterion(capsys):
    """Record one pass/fail line per acceptance criterion and echo it uncaptured."""
    def record(label, passed, measured):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {label}: {measured}"
        _CRITERIA.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
