import numpy as np
import pytest

from corrdiff.corrmat import scale_to_correlation


def random_corr(p, rng, df=None):
    """Scaled Gram matrix of a (df x p) Gaussian; positive definite for df >= p."""
    x = rng.standard_normal((df or 2 * p, p))
    return scale_to_correlation(x.T @ x)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = {}


def record(k, ok, detail):
    """Store and print one acceptance line; the summary hook repeats them at the end."""
    line = f"[ACCEPT {k:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[k] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
