import numpy as np
import pytest

from solartrade.data import Dataset, DayRecord, split_chronological, synth_dataset


def make_dataset(prices, generation, start=0) -> Dataset:
    return Dataset(tuple(DayRecord(start + i, float(p), float(g))
                         for i, (p, g) in enumerate(zip(prices, generation))))


@pytest.fixture(scope="session")
def frozen():
    """The frozen 365-day synthetic dataset and its chronological split."""
    ds = synth_dataset(365, 42)
    train, test = split_chronological(ds, 0.3)
    return ds, train, test


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
