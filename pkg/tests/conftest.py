import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from invariance_lab.cdp import synth_random_cdp

settings.register_profile("lab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


@st.composite
def small_cdps(draw, max_d=3, max_domain=3, max_actions=3):
    d = draw(st.integers(1, max_d))
    return synth_random_cdp(
        d,
        draw(st.integers(2, max_domain)),
        draw(st.integers(1, max_actions)),
        draw(st.integers(0, d)),
        gamma=draw(st.sampled_from([0.5, 0.9])),
        seed=draw(st.integers(0, 2**20)),
    )


@pytest.fixture
def cdp3():
    return synth_random_cdp(3, 3, 2, 2, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
