import numpy as np
import pytest

from response_trajectories.inference.diagnostics import convergence_problems, rhat, summarize
from response_trajectories.inference.nuts import (
    Point,
    PosteriorDraws,
    SamplerConfig,
    hamiltonian,
    is_uturn,
    leapfrog,
    make_warmup_windows,
    nuts_sample,
)
from response_trajectories.inference.params import ParamLayout, ParamVector, Transform
from response_trajectories.utils.exceptions import DomainError, SamplerFailure

from .. import MSG_NO_MATCH


class Gaussian:
    """A zero-mean multivariate normal target."""

    def __init__(self, cov):
        self.precision = np.linalg.inv(np.atleast_2d(cov))

    def value_and_grad(self, q):
        g = -self.precision @ q
        return 0.5 * float(q @ g), g


class Funnel:
    """Neal's funnel: v ~ N(0, 3²) and x_i ~ N(0, exp(v)) given v."""

    def value_and_grad(self, q):
        v, x = q[0], q[1:]
        scale = np.exp(-v)
        logp = -v**2 / 18.0 - 0.5 * float(x @ x) * scale - 0.5 * len(x) * v
        grad = np.concatenate([[-v / 9.0 + 0.5 * float(x @ x) * scale - 0.5 * len(x)], -x * scale])
        return logp, grad


class TwoModes:
    """Two unit normals at ±20, separated by a barrier no trajectory crosses."""

    def value_and_grad(self, q):
        distance = np.abs(q) - 20.0
        return -0.5 * float(distance @ distance), -distance * np.sign(q)


class Nowhere:
    def value_and_grad(self, q):
        return -np.inf, np.zeros_like(q)


def test_warmup_windows():
    """Test the adaptation windows of the default warmup"""
    windows = make_warmup_windows(1000)
    assert windows[0] == (75, 100)
    assert windows[-1][1] == 950
    assert all(a[1] == b[0] for a, b in zip(windows, windows[1:])), MSG_NO_MATCH
    assert [end - start for start, end in windows[:-1]] == [25, 50, 100, 200]


@pytest.mark.parametrize("warmup", [0, 10, 20])
def test_short_warmup_has_no_windows(warmup):
    assert make_warmup_windows(warmup) == []


def test_leapfrog_energy_error_order():
    """Test that one leapfrog step changes the energy at third order in the step size"""
    target = Gaussian(1.0)
    q = np.array([1.0])
    logp, grad = target.value_and_grad(q)
    start = Point(q, np.array([1.0]), logp, grad)
    inv_mass = np.ones(1)
    steps = np.array([1e-1, 1e-2, 1e-3, 1e-4])
    errors = []
    for eps in steps:
        new = leapfrog(target, start, eps, inv_mass)
        errors.append(abs(hamiltonian(new.logp, new.p, inv_mass) - hamiltonian(logp, start.p, inv_mass)))
    slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert slope == pytest.approx(3.0, abs=0.1), MSG_NO_MATCH


def test_standard_normal():
    """Test the moments and convergence of draws from a standard normal"""
    config = SamplerConfig(chains=4, warmup=500, draws=1000, seed=11)
    draws = nuts_sample(Gaussian(1.0), config, np.zeros(1))
    x = draws.draws[:, :, 0]
    assert draws.draws.shape == (4, 1000, 1)
    assert abs(x.mean()) < 0.1, MSG_NO_MATCH
    assert x.var() == pytest.approx(1.0, abs=0.15), MSG_NO_MATCH
    assert rhat(x) < 1.01


def test_correlated_normal():
    """Test the correlation of draws from a correlated bivariate normal"""
    config = SamplerConfig(chains=4, warmup=500, draws=1000, seed=5)
    draws = nuts_sample(Gaussian([[1.0, 0.9], [0.9, 1.0]]), config, np.zeros(2))
    flat = draws.flat()
    assert np.corrcoef(flat.T)[0, 1] == pytest.approx(0.9, abs=0.05), MSG_NO_MATCH
    assert draws.names == ["q[0]", "q[1]"]


def test_seeded_runs_are_identical():
    """Test determinism across runs and thread counts"""
    config = SamplerConfig(chains=2, warmup=50, draws=50, seed=3)
    threaded = SamplerConfig(chains=2, warmup=50, draws=50, seed=3, threads=2)
    first = nuts_sample(Gaussian(1.0), config, np.zeros(1))
    second = nuts_sample(Gaussian(1.0), config, np.zeros(1))
    third = nuts_sample(Gaussian(1.0), threaded, np.zeros(1))
    assert np.array_equal(first.draws, second.draws), MSG_NO_MATCH
    assert np.array_equal(first.draws, third.draws), MSG_NO_MATCH
    assert np.array_equal(first.step_sizes, third.step_sizes)


def test_constrained_draws():
    """Test that log-transformed coordinates are reported on the positive scale"""
    layout = ParamLayout()
    layout.add("scale", 1, Transform.LOG)
    config = SamplerConfig(chains=1, warmup=50, draws=20, seed=0)
    draws = nuts_sample(Gaussian(1.0), config, ParamVector(np.zeros(1), layout))
    assert draws.names == ["scale"]
    assert np.allclose(draws.draws, np.exp(draws.unconstrained))
    assert draws.column("scale").shape == (1, 20)


@pytest.mark.parametrize(
    "p_minus, p_plus, turning",
    [([1.0, 0.0], [1.0, 0.0], False), ([-1.0, 0.0], [1.0, 0.0], True), ([1.0, 0.0], [-0.5, 2.0], True)],
)
def test_uturn_criterion(p_minus, p_plus, turning):
    """Test the U-turn check on the momenta at both ends of a trajectory"""
    minus = Point(np.zeros(2), np.array(p_minus), 0.0, np.zeros(2))
    plus = Point(np.array([1.0, 0.0]), np.array(p_plus), 0.0, np.zeros(2))
    assert is_uturn(minus, plus, np.ones(2)) is turning, MSG_NO_MATCH
    # a heavy first coordinate only rescales the projections
    assert is_uturn(minus, plus, np.array([0.01, 1.0])) is turning


def test_funnel_divergences():
    """Test that the neck of a funnel produces divergent transitions"""
    config = SamplerConfig(chains=4, warmup=300, draws=300, seed=2)
    draws = nuts_sample(Funnel(), config, np.zeros(10))
    assert draws.divergences.any(), MSG_NO_MATCH
    assert np.all(np.isfinite(draws.draws))


def test_separated_chains_are_flagged():
    """Test that chains sampling different modes fail the convergence check"""
    config = SamplerConfig(chains=1, warmup=100, draws=200, seed=4)
    runs = [nuts_sample(TwoModes(), config, np.array([start])) for start in (-20.0, 20.0)]
    assert runs[0].draws.max() < 0 < runs[1].draws.min(), MSG_NO_MATCH

    def stacked(name):
        return np.concatenate([getattr(run, name) for run in runs])

    pooled = PosteriorDraws(
        draws=stacked("draws"),
        logp=stacked("logp"),
        divergences=stacked("divergences"),
        tree_depths=stacked("tree_depths"),
        step_sizes=stacked("step_sizes"),
        accept_stats=stacked("accept_stats"),
        n_leapfrog=stacked("n_leapfrog"),
        names=runs[0].names,
    )
    assert convergence_problems(summarize(pooled)) == ["q[0]"], MSG_NO_MATCH


def test_no_finite_density():
    """Test a target without any finite point"""
    with pytest.raises(SamplerFailure):
        nuts_sample(Nowhere(), SamplerConfig(chains=1, warmup=10, draws=10), np.zeros(2))


@pytest.mark.parametrize(
    "settings",
    [{"chains": 0}, {"draws": 0}, {"target_accept": 1.0}, {"max_tree_depth": 0}, {"threads": 0}],
)
def test_invalid_settings(settings):
    with pytest.raises(DomainError):
        SamplerConfig(**settings)
