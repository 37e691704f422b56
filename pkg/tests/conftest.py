import numpy as np
import pytest

from bgaudit.image_core import ImageTensor


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_image(rng, h, w, c=1, quantized=False):
    data = rng.random((h, w, c))
    if quantized:
        data = rng.integers(0, 256, size=(h, w, c)) / 255.0
    return ImageTensor(data)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end audit runs taking minutes")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
