import numpy as np
import pytest

from hsimamba.data import synth_dataset
from hsimamba.train import TrainConfig

# narrow network so unit tests stay fast
SMALL_ARCH = {"conv_channels": 4, "head_hidden": 8}


@pytest.fixture(scope="session")
def small_cube():
    return synth_dataset(3, 12, 12, 8, 0.1, seed=0)


@pytest.fixture
def small_config():
    return TrainConfig(patch_size=5, pca_dim=4, embed_dim=4, state_size=2, route=5, epochs=2,
                       batch_size=16, learning_rate=0.01, seed=0, train_fraction=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance lines, echoed again at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
