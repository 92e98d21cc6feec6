import numpy as np
import pytest

from sacvit import TINY, TOY, init_params
from sacvit.encoder import as_tensors
from sacvit.numerics import set_precision


@pytest.fixture(autouse=True)
def _f32_default():
    set_precision("f32")
    yield
    set_precision("f32")


@pytest.fixture
def tiny_params():
    return init_params(TINY)


@pytest.fixture
def tiny_weights(tiny_params):
    return as_tensors(tiny_params)


@pytest.fixture
def toy_params():
    return init_params(TOY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_images(cfg, n, seed=0):
    return np.random.default_rng(seed).standard_normal((n, cfg.in_chans, *cfg.image_hw)).astype(np.float32)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
