import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gbd_agent.nlp import SubproblemCache
from gbd_agent.problem import CaseStudyCoefficients, build_case_study1, build_toy_facility

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def nominal():
    return build_case_study1(CaseStudyCoefficients.nominal())


@pytest.fixture(scope="session")
def toy():
    return build_toy_facility()


@pytest.fixture(scope="session")
def cache():
    return SubproblemCache()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
