import numpy as np
import pytest

from gazeguide.model import UNetConfig, build


def tiny_model(seed=0, size=16, channels=(2, 3), dtype="float64"):
    """Small float64 U-Net for finite-difference checks."""
    return build(UNetConfig((size, size), channels, seed=seed, dtype=dtype))


def random_images(n, size, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).random((n, 1, size, size)).astype(dtype)


@pytest.fixture
def tiny():
    return tiny_model()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
