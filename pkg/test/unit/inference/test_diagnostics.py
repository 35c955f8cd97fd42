import arviz as az
import numpy as np
import pytest

from response_trajectories.inference.diagnostics import (
    convergence_problems,
    diagnose,
    ess_bulk,
    ess_tail,
    rhat,
    summarize,
)
from response_trajectories.inference.nuts import PosteriorDraws
from response_trajectories.utils.exceptions import DomainError

from .. import MSG_NO_MATCH


def _draws(values):
    chains, n_draws, dim = values.shape
    return PosteriorDraws(
        draws=values,
        logp=np.zeros((chains, n_draws)),
        divergences=np.zeros((chains, n_draws), dtype=bool),
        tree_depths=np.ones((chains, n_draws), dtype=int),
        step_sizes=np.ones(chains),
        accept_stats=np.ones((chains, n_draws)),
        n_leapfrog=np.ones((chains, n_draws), dtype=int),
        names=[f"x[{i}]" for i in range(dim)],
    )


def _ar1(phi, shape, seed):
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(shape)
    x = np.zeros(shape)
    for t in range(1, shape[1]):
        x[:, t] = phi * x[:, t - 1] + noise[:, t]
    return x


def test_independent_chains():
    """Test the diagnostics of independent draws"""
    x = np.random.default_rng(0).standard_normal((4, 1000))
    assert rhat(x) < 1.01, MSG_NO_MATCH
    assert ess_bulk(x) > 2000
    assert ess_tail(x) > 1000


def test_shifted_chains():
    """Test that chains stuck in different places are flagged"""
    x = np.random.default_rng(1).standard_normal((4, 500)) + np.arange(4)[:, None] * 3.0
    assert rhat(x) > 1.05, MSG_NO_MATCH


def test_autocorrelated_chains():
    """Test the effective sample size of a strongly autocorrelated series"""
    x = _ar1(0.9, (4, 2000), seed=2)
    # the asymptotic ratio is (1 - 0.9) / (1 + 0.9)
    assert ess_bulk(x) < 0.2 * x.size, MSG_NO_MATCH
    assert ess_bulk(x) > 0.02 * x.size


def test_constant_parameter():
    result = diagnose(np.ones((2, 10)))
    assert result.constant
    assert np.isnan(result.rhat)


def test_too_few_draws():
    with pytest.raises(DomainError):
        rhat(np.zeros((2, 3)))


def test_summary_and_problems():
    """Test the summary table and the convergence report"""
    rng = np.random.default_rng(3)
    good = rng.standard_normal((4, 200))
    bad = rng.standard_normal((4, 200)) + np.arange(4)[:, None] * 5.0
    table = summarize(_draws(np.stack([good, bad, np.ones((4, 200))], axis=-1)))
    assert list(table.columns) == ["mean", "sd", "q5", "q95", "rhat", "ess_bulk", "ess_tail", "constant"]
    assert list(table.index) == ["x[0]", "x[1]", "x[2]"]
    assert bool(table.loc["x[2]", "constant"])
    assert convergence_problems(table) == ["x[1]"], MSG_NO_MATCH


def test_summary_matches_inference_data():
    """Test the table against the summary of the same draws as inference data"""
    values = _ar1(0.5, (4, 300), seed=4)
    table = summarize(_draws(values[..., None]))
    reference = az.summary(az.from_dict(posterior={"x": values}), round_to="none")
    assert table.loc["x[0]", "rhat"] == pytest.approx(reference.loc["x", "r_hat"]), MSG_NO_MATCH
    assert table.loc["x[0]", "ess_bulk"] == pytest.approx(reference.loc["x", "ess_bulk"])
    assert table.loc["x[0]", "ess_tail"] == pytest.approx(reference.loc["x", "ess_tail"])
