import numpy as np
import pytest

from signnet.data import synth_generate
from signnet.model import ModelConfig

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def desk_config():
    return ModelConfig()


@pytest.fixture
def tiny_config():
    return ModelConfig(conv_channels=[2, 3, 4], lstm_hidden=4, fc_hidden=6, num_classes=3,
                       frames=3, height=8, width=8)


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """3 classes x 6 clips of 16 frames at 32x32."""
    out = tmp_path_factory.mktemp("synth_small")
    synth_generate(3, 6, 16, 32, 32, 5, out)
    return out


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
