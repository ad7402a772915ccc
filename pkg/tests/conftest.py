import numpy as np
import pytest

from mbmf.data import SparseObservations
from mbmf.spherical import AngleState, MagnitudePair


def random_instance(rng, n, m, k, density=0.6):
    """Random observations, magnitudes and angles of matching shape."""
    mask = rng.random((n, m)) < density
    mask[0, 0] = True
    data = SparseObservations.from_dense(rng.normal(size=(n, m)), mask)
    mags = MagnitudePair(rng.uniform(0.5, 2.0, n), rng.uniform(0.5, 2.0, m))
    angles = AngleState.random(n, m, k, rng)
    return data, mags, angles


def central_difference(f, x, step=1e-6):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += step
        down[idx] -= step
        out[idx] = (f(up) - f(down)) / (2 * step)
    return out


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
