import numpy as np
import pytest
from hypothesis import settings

from fgo_integrity.geom import ImuState, Rotation
from fgo_integrity.scenario import ScenarioConfig, build_scenario

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def random_state(rng, clock=True) -> ImuState:
    return ImuState(
        p=rng.normal(0, 20, 3), v=rng.normal(0, 3, 3),
        q=Rotation.from_rotvec(rng.normal(0, 0.7, 3)),
        ba=rng.normal(0, 0.05, 3), bg=rng.normal(0, 0.005, 3),
        clock=rng.normal(0, 1e-4, 4) if clock else np.zeros(4),
        drift=rng.normal(0, 1e-8) if clock else 0.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def short_scenario():
    return build_scenario(ScenarioConfig(duration=6.0), seed=3)


@pytest.fixture(scope="session")
def noiseless_scenario():
    return build_scenario(ScenarioConfig(duration=6.0, noise_scale=0.0), seed=3)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
