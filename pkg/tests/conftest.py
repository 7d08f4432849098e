import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tubeil import config  # noqa: E402
from tubeil.sets import AxisBox  # noqa: E402

FIXED_TUBE = AxisBox.symmetric([0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.05, 0.05])


@pytest.fixture(scope="session")
def cfg():
    return config.load()


@pytest.fixture(scope="session")
def params(cfg):
    return config.vehicle(cfg)


@pytest.fixture(scope="session")
def fixed_tube_setup(cfg):
    """Linear setup with a hand-set tube: cheap, for unit tests."""
    from tubeil.linear_env import build_linear_setup
    return build_linear_setup(cfg, tube=FIXED_TUBE)


@pytest.fixture(scope="session")
def workspace(cfg, tmp_path_factory):
    """Shared artifact directory: Monte-Carlo tubes and the flip plan are
    computed once per test session."""
    from tubeil.suite import Workspace
    return Workspace(tmp_path_factory.mktemp("artifacts"), cfg)


@pytest.fixture(scope="session")
def flip_plan(cfg, params):
    from tubeil.flip_env import planner_config
    from tubeil.nonlinear.planner import plan_safe_flip
    return plan_safe_flip(params, planner_config(cfg, params))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
