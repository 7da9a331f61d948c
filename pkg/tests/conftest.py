import sys

import pytest

from queuecontrol.costs import make_exponential_cost
from queuecontrol.hjb import DcpParams, ShootingConfig, shoot_r_star, solve_zero_control

# reference experiment: p = sigma = 1, theta = alpha = 0.5, C(u) = exp(-5u)
REFERENCE = dict(sigma=1.0, theta=0.5, alpha=0.5, p=1.0)


@pytest.fixture(scope="session")
def params():
    return DcpParams(cost=make_exponential_cost(5.0), **REFERENCE)


@pytest.fixture(scope="session")
def shooting():
    return ShootingConfig()


@pytest.fixture(scope="session")
def solution(params, shooting):
    return shoot_r_star(params, shooting)


@pytest.fixture(scope="session")
def zero_solution(params, shooting):
    return solve_zero_control(params, shooting)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
