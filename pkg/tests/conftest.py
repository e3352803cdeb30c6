import numpy as np
import pytest

from udareg.data import SyntheticConfig, generate_synthetic
from udareg.trainer import DomainData

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def accept():
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    def record(label, ok, detail):
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        assert ok, f"{label}: {detail}"
    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_data():
    source, target = generate_synthetic(SyntheticConfig())
    return DomainData.from_examples(source, target)


@pytest.fixture(scope="session")
def small_data():
    source, target = generate_synthetic(SyntheticConfig(dim=8, n_source=120, n_target=60, seed=3))
    return DomainData.from_examples(source, target)
