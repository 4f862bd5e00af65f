import math
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from delayfolio.closed_form import LqParams
from delayfolio.market_model import ModelDims, PowerUtility, build_coefficients

LN2 = math.log(2.0)
# pointwise set whose closed form meets p_hat(T) = 0 (beta_3 = 0)
CONSISTENT = dict(alpha=(0.5, 1.0, 0.25), beta=(1.0, 0.5, 0.0))
# pointwise set with beta_3 / alpha_3 = -1
LITERAL = dict(alpha=(0.5, 1.0, 0.25), beta=(0.5, -0.5, -0.25))
FIGURE1 = dict(alpha=(1.0, 1.0), beta=(-2.0, -2.0))


def merton_coeffs(r=0.03, mu=0.08, sigma=0.2, gamma=0.5):
    return build_coefficients("constant", ModelDims(1, 1, 1), gamma, dict(r=r, mu=mu, sigma=sigma))


@pytest.fixture
def merton():
    return merton_coeffs()


@pytest.fixture
def utility():
    return PowerUtility(0.5, 1.0)


def pointwise_params(which=CONSISTENT, **kw):
    return LqParams(which["alpha"], which["beta"], lam=1.0, delta=LN2, **kw)


def figure1_params(**kw):
    return LqParams(FIGURE1["alpha"], FIGURE1["beta"], **kw)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
