import numpy as np
import pytest

from segqc.datagen import build_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 phantoms x 10 severities on the default grid; shared read-only."""
    out = tmp_path_factory.mktemp("tiny")
    return build_dataset(out, 12, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_labels(rng, dims):
    return rng.integers(0, 4, size=dims).astype(np.uint8)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """40 phantoms: enough for RCA rebalancing to leave every bin populated."""
    out = tmp_path_factory.mktemp("small")
    return build_dataset(out, 40, seed=5)


def pytest_terminal_summary(terminalreporter):
    from _acceptance_log import LINES
    if not LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(LINES):
        terminalreporter.write_line(LINES[n])
