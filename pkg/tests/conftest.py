import numpy as np
import pytest
from scipy import stats

from bsvcert.odd import landing_space


@pytest.fixture
def space():
    return landing_space()


def scipy_truncnorm(mu, sigma, lower, upper):
    """Reference truncated normal from scipy.stats, used as an independent oracle."""
    return stats.truncnorm((lower - mu) / sigma, (upper - mu) / sigma, loc=mu, scale=sigma)


def rejection_sample(mu, sigma, lower, upper, n, rng):
    """Truncated-normal draws by rejection, independent of the inverse-CDF sampler."""
    chunks, have = [], 0
    while have < n:
        x = rng.normal(mu, sigma, 2 * n)
        x = x[(x >= lower) & (x <= upper)]
        chunks.append(x)
        have += len(x)
    return np.concatenate(chunks)[:n]


_criteria: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _criteria.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in _criteria:
            terminalreporter.write_line(line)
