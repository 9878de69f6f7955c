import datetime as dt

import numpy as np
import pytest

from fleetlife.bootstrap import WeightLaw, run_bootstrap
from fleetlife.data import LifetimeObservation
from fleetlife.likelihood import fit_mle
from fleetlife.simulation import fleet_observations, generate_fleet, reference_scenario


def obs(age, delta=1, tau=None, group="G", serial=None, **cov):
    """Terse observation constructor for hand-built cases."""
    return LifetimeObservation(
        serial=serial or f"u{age}-{delta}-{tau}",
        age=float(age),
        delta=delta,
        nu=0 if tau is not None else 1,
        tau_L=None if tau is None else float(tau),
        covariates={"insulation": "d55", "cooling": "NINE", "manufacturer": "MA", **cov},
        group=group,
        predict_group=group,
    )


@pytest.fixture(scope="session")
def reference_fleet():
    return generate_fleet(reference_scenario())


@pytest.fixture(scope="session")
def reference_obs(reference_fleet):
    return fleet_observations(reference_fleet)


@pytest.fixture(scope="session")
def reference_fit(reference_obs):
    return fit_mle(reference_scenario().model_spec(), reference_obs)


@pytest.fixture(scope="session")
def reference_ensemble(reference_obs, reference_fit):
    return run_bootstrap(reference_fit.spec, reference_obs, WeightLaw.GAMMA_UNIT, B=200, master_seed=11,
                         base_fit=reference_fit)


@pytest.fixture
def exp_params():
    from fleetlife.distributions import LocationScaleParams

    return LocationScaleParams.from_weibull(2.0, 1.0)


def freeze():
    return dt.date(2008, 3, 31)


def rng(seed=0):
    return np.random.default_rng(seed)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        line = f"A{number:<2} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1:3])):
            terminalreporter.write_line(line)
