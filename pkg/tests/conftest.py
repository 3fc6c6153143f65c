import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ectraj import features as ft
from ectraj import latent as lt
from ectraj import scenegen as sg


@pytest.fixture(scope="session")
def scenes():
    return sg.generate_dataset(11, 40, sg.SceneConfig())


@pytest.fixture(scope="session")
def arrays(scenes):
    return ft.build_arrays(scenes, sg.OracleConfig(), seed=0)


@pytest.fixture(scope="session")
def codec(arrays):
    return lt.fit_codec(arrays.target[arrays.agent_mask], epochs=150)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
