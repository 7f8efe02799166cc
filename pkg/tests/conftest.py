import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def write(tmp_path):
    """Write text to a file under tmp_path and return its path."""

    def _write(name, text):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write


def random_correlation(rng, p, n=None, rho=0.6):
    """Sample correlation of an AR(1) Gaussian panel; well conditioned when n >> p."""
    n = n or 3 * p + 5
    e = rng.standard_normal((n, p))
    x = np.empty_like(e)
    x[:, 0] = e[:, 0]
    for j in range(1, p):
        x[:, j] = rho * x[:, j - 1] + np.sqrt(1 - rho * rho) * e[:, j]
    return np.atleast_2d(np.corrcoef(x, rowvar=False))


VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
