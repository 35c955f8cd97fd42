import logging

import numpy as np
import pytest

from response_trajectories.data import PatientData, TreatmentEvent
from response_trajectories.inference.nuts import PosteriorDraws
from response_trajectories.inference.params import ParamLayout, transform
from response_trajectories.simulate import SimConfig, simulate_toy

POINT_DEFAULTS = {
    "beta_h_tilde": 0.3,
    "beta_l_tilde": 0.1,
    "sigma_h": 0.5,
    "sigma_l": 0.5,
    "beta_h": 0.5,
    "beta_l": 0.1,
    "se_amplitude": 0.5,
    "se_lengthscale": 120.0,
    "const_amplitude": 0.1,
    "sigma_y": 0.2,
    "report_bias": 10.0,
    "time_offsets": 0.0,
    "log_amount_errors": 0.1,
}


@pytest.fixture(autouse=True)
def log_levels():
    logging.getLogger().setLevel(logging.DEBUG)
    logging.getLogger("response_trajectories").setLevel(logging.INFO)


@pytest.fixture
def patient():
    times = np.arange(0.0, 600.0, 15.0)
    rng = np.random.default_rng(3)
    events = [TreatmentEvent(60.0, [1.0, 0.5]), TreatmentEvent(300.0, [0.8, 1.2])]
    outcome = 0.001 * times + 0.1 * rng.standard_normal(len(times))
    return PatientData(outcome=outcome, obs_times=times, events=events, patient_id="a")


@pytest.fixture
def second_patient():
    times = np.arange(0.0, 480.0, 20.0)
    rng = np.random.default_rng(4)
    events = [TreatmentEvent(100.0, [0.5, 1.0])]
    outcome = np.sin(times / 100.0) + 0.1 * rng.standard_normal(len(times))
    return PatientData(outcome=outcome, obs_times=times, events=events, patient_id="b")


@pytest.fixture
def toy():
    """Two simulated patients over three days with hourly observations and four meals each."""
    return simulate_toy(SimConfig(n_patients=2, meals_per_patient=4, cadence=60.0, seed=1))


def constrained_point(layout: ParamLayout, **values: float) -> np.ndarray:
    """A plausible constrained parameter vector; ``values`` override the value of a block kind."""
    theta = np.zeros(layout.dim)
    for block in layout:
        kind = block.name.split("[")[0]
        theta[block.index] = values.get(kind, POINT_DEFAULTS[kind])
    return theta


@pytest.fixture
def make_draws():
    """Builds draws repeating one constrained point."""

    def build(layout: ParamLayout, theta: np.ndarray, chains: int = 2, n_draws: int = 4):
        values = np.tile(theta, (chains, n_draws, 1))
        return PosteriorDraws(
            draws=values,
            logp=np.zeros((chains, n_draws)),
            divergences=np.zeros((chains, n_draws), dtype=bool),
            tree_depths=np.ones((chains, n_draws), dtype=int),
            step_sizes=np.full(chains, 0.1),
            accept_stats=np.full((chains, n_draws), 0.8),
            n_leapfrog=np.ones((chains, n_draws), dtype=int),
            names=layout.names(),
            layout=layout,
            unconstrained=np.tile(transform(theta, layout), (chains, n_draws, 1)),
        )

    return build


@pytest.fixture
def make_point():
    return constrained_point
