import numpy as np
import pytest


def pytest_addoption(parser):
    parser.addoption("--slow", action="store_true", default=False,
                     help="run the Monte Carlo acceptance studies")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo study, enabled with --slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip = pytest.mark.skip(reason="needs --slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_trial(rng, I=12, J=4, n_range=(2, 6), p=2, effect=1.0, tau=0.5, kappa=0.3, sigma=1.0,
               adoption=None, binary=False):
    """Small random stepped-wedge trial with Gaussian or Bernoulli outcomes."""
    from swedge.data_model import TrialData
    if adoption is None:
        adoption = np.resize(np.arange(1, J + 1), I)
        rng.shuffle(adoption)
    cl, pe, ys, xs = [], [], [], []
    for i in range(I):
        a = rng.normal(0, tau)
        for j in range(1, J + 1):
            n = rng.integers(n_range[0], n_range[1] + 1)
            g = rng.normal(0, kappa)
            x = rng.normal(size=(n, p))
            eta = 0.2 * j + effect * (adoption[i] <= j) + a + g + x @ np.linspace(0.5, -0.5, p)
            if binary:
                y = rng.binomial(1, 1 / (1 + np.exp(-eta))).astype(float)
            else:
                y = eta + rng.normal(0, sigma, n)
            cl += [i] * n
            pe += [j] * n
            ys.append(y)
            xs.append(x)
    return TrialData(np.array(cl), np.array(pe), np.concatenate(ys),
                     {i: int(z) for i, z in enumerate(adoption)}, x=np.vstack(xs),
                     covariate_names=[f"x{k + 1}" for k in range(p)], n_periods=J)
