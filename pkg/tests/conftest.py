import numpy as np
import pytest

from convdrop import rng
from convdrop.layers import BatchNorm2d

# Lines recorded by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def he_init(layer, seed=0, affine=True):
    """He-normal weights and, optionally, non-trivial BN affine params."""
    for i, m in enumerate(layer.modules()):
        for key, v in m.params.items():
            g = rng.keyed(rng.INIT, 500 + seed, i, len(key))
            if key == "weight":
                m.params[key] = g.normal(0.0, np.sqrt(2.0 / m.fan_in), v.shape)
            elif affine and key == "gamma":
                m.params[key] = 1.0 + 0.2 * g.normal(size=v.shape)
            elif affine:
                m.params[key] = 0.2 * g.normal(size=v.shape)
    return layer


def randn(*shape, seed=0):
    return rng.keyed(rng.DATA, 900, seed, len(shape)).normal(size=shape)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
