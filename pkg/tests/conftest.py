import numpy as np
import pytest

from spectral_hybrid.spectral_core import Grid, fwd


def random_coeffs(grid: Grid, rng, channels=1, keep_fraction=1.0, batch=None):
    """Coefficients of a random real field; modes above ``keep_fraction`` of Nyquist zeroed."""
    shape = ((batch,) if batch else ()) + (channels,) + grid.shape
    c = fwd(rng.standard_normal(shape), grid.ndim)
    cutoff = keep_fraction * (grid.n // 2)
    mask = np.ones(grid.shape, dtype=bool)
    for ax in range(grid.ndim):
        m = np.abs(grid.modes)
        m = m if grid.ndim == 1 else (m[:, None] if ax == 0 else m[None, :])
        mask &= np.broadcast_to(m < cutoff, grid.shape)
    return c * mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines are collected here and printed after the run, since
# pytest captures stdout of passing tests
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
