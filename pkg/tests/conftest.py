from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from medchain.baselines import fit_parametric
from medchain.dgp import DgpConfig, simulate_panel
from medchain.dpm.model import Mcmc
from medchain.dynamics import sequential_fit

settings.register_profile(
    "medchain", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("medchain")

# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture(autouse=True)
def _quiet_runtime_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@pytest.fixture(scope="session")
def quick_mcmc() -> Mcmc:
    return Mcmc(400, 100, 2)


@pytest.fixture(scope="session")
def small_panel():
    return simulate_panel(DgpConfig.default(n=400, T=2), seed=11)


@pytest.fixture(scope="session")
def reg2_system(small_panel):
    return fit_parametric(small_panel, "reg2", n_draws=100, seed=3)


@pytest.fixture(scope="session")
def bdm_system(small_panel, quick_mcmc):
    return sequential_fit(small_panel, mcmc=quick_mcmc, seed=5, dynamic=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
