import numpy as np
import pytest

from truncem import core, problems


def _zero_drift(x, y):
    return np.zeros_like(x)


def _unit_diffusion(x, y):
    return np.ones(np.shape(x) + (1,))


def _decay(x, y):
    return -x


def _zero_diffusion(x, y):
    return np.zeros(np.shape(x) + (1,))


def make_problem(drift, diffusion, xi=1.0, tau=0.01, delay=None, delta_hat=0.0):
    delay_fn = core.DelayFunction(delay or problems.ConstantDelay(tau), tau, delta_hat)
    return core.SddeProblem(1, 1, drift, diffusion, delay_fn, core.InitialPath.constant(xi))


@pytest.fixture
def brownian_problem():
    """``dX = dB`` started at zero."""
    return make_problem(_zero_drift, _unit_diffusion, xi=0.0, tau=0.125)


@pytest.fixture
def decay_problem():
    return make_problem(_decay, _zero_diffusion, xi=1.0)


@pytest.fixture
def wide_policy():
    # radius in the thousands: truncation never activates on these problems
    return core.power_policy(1.0, 1.0, 1e4, -0.25)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
