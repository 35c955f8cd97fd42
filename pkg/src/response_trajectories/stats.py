"""Rank tests, Pareto-smoothed leave-one-out estimates and vector similarity."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations

import arviz as az
import numpy as np
from scipy.stats import norm, rankdata, tiecorrect

from .utils.exceptions import DomainError
from .utils.logger import LOGGER

EXACT_LIMIT = 12
PARETO_K_WARNING = 0.7


@dataclass
class UTestResult:
    """
    Outcome of a one-sided Mann-Whitney U-test.

    :ivar u: The U statistic of the first sample, midranks used for ties.
    :ivar p_one_sided: ``P(U <= u)`` under the null hypothesis; small values mean the first sample
        tends to be smaller than the second.
    :ivar exact: Whether the p-value comes from complete enumeration.
    :ivar degenerate: All values were identical and the test carries no information.
    """

    u: float
    p_one_sided: float
    exact: bool
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "u": self.u,
            "p_one_sided": self.p_one_sided,
            "exact": self.exact,
            "degenerate": self.degenerate,
        }


def _u_statistic(ranks: np.ndarray, n_a: int) -> float:
    return float(np.sum(ranks) - n_a * (n_a + 1) / 2.0)


def mann_whitney_u(a, b, exact: bool | None = None) -> UTestResult:
    """
    One-sided Mann-Whitney U-test of ``a`` being stochastically smaller than ``b``.

    The p-value is exact (enumeration of every assignment of the pooled midranks to the first
    sample) when ``len(a) + len(b) <= 12``, and otherwise uses the normal approximation with
    tie-corrected variance and continuity correction.

    :param a: The first sample.
    :param b: The second sample.
    :param exact: Force or forbid exact enumeration.
    :return: The statistic and the p-value.
    :raises DomainError: If a sample is empty or not finite.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    for name, sample in (("a", a), ("b", b)):
        if len(sample) == 0:
            raise DomainError(name, "[]", "a non-empty sample")
        if not np.all(np.isfinite(sample)):
            raise DomainError(name, sample.tolist(), "finite values")

    n_a, n_b = len(a), len(b)
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled, method="average")
    u = _u_statistic(ranks[:n_a], n_a)
    if np.ptp(pooled) == 0:
        return UTestResult(u, 0.5, exact=False, degenerate=True)

    if exact is None:
        exact = n_a + n_b <= EXACT_LIMIT
    if exact:
        stats = np.array(
            [_u_statistic(ranks[list(idx)], n_a) for idx in combinations(range(n_a + n_b), n_a)]
        )
        p = float(np.mean(stats <= u + 1e-9))
        return UTestResult(u, p, exact=True)

    n = n_a + n_b
    mean = n_a * n_b / 2.0
    sd = np.sqrt(n_a * n_b * (n + 1) / 12.0 * tiecorrect(ranks))
    p = float(norm.cdf((u - mean + 0.5) / sd))
    return UTestResult(u, min(p, 1.0), exact=False)


def cosine_similarity(estimate, truth) -> float:
    """
    Cosine of the angle between two vectors.

    :return: A value in ``[-1, 1]``; NaN (with a warning) if either vector has zero norm.
    """
    estimate = np.asarray(estimate, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if estimate.shape != truth.shape:
        raise DomainError("estimate", estimate.shape, f"shape {truth.shape}")
    norms = np.linalg.norm(estimate) * np.linalg.norm(truth)
    if norms == 0:
        LOGGER.warning("cosine similarity of a zero vector is undefined")
        return float("nan")
    return float(np.clip(estimate @ truth / norms, -1.0, 1.0))


@dataclass
class LooResult:
    """
    Pareto-smoothed importance-sampling leave-one-out estimate.

    ``elpd_loo`` is a log score: higher is better. ``deviance`` is the same quantity on the
    ``-2·elpd`` scale, where lower is better.

    :ivar elpd_loo: Sum of the pointwise leave-one-out log predictive densities.
    :ivar p_loo: In-sample log predictive density minus ``elpd_loo``.
    :ivar se_loo: Standard error of ``elpd_loo``.
    :ivar pointwise: Leave-one-out log predictive density of every retained observation.
    :ivar pareto_k: Shape estimate of every observation, NaN for excluded ones.
    :ivar excluded: Indices of observations with non-finite log-likelihoods.
    """

    elpd_loo: float
    p_loo: float
    se_loo: float
    pointwise: np.ndarray
    pareto_k: np.ndarray
    excluded: list[int] = field(default_factory=list)

    @property
    def deviance(self) -> float:
        return -2.0 * self.elpd_loo

    @property
    def unreliable(self) -> np.ndarray:
        """Indices of observations whose shape estimate exceeds 0.7."""
        with np.errstate(invalid="ignore"):
            return np.flatnonzero(self.pareto_k > PARETO_K_WARNING)

    def to_dict(self) -> dict:
        return {
            "elpd_loo": self.elpd_loo,
            "p_loo": self.p_loo,
            "se_loo": self.se_loo,
            "deviance": self.deviance,
            "n_unreliable": int(len(self.unreliable)),
            "excluded": list(self.excluded),
        }


def psis_loo(loglik: np.ndarray) -> LooResult:
    """
    Leave-one-out predictive accuracy from posterior draws.

    The importance ratios are Pareto smoothed by :func:`arviz.loo`. Draws are treated as
    independent (``reff = 1``), since they come thinned from all chains.

    :param loglik: ``(draws, observations)`` pointwise log-likelihoods.
    :return: The estimate; observations with non-finite entries are excluded with a warning.
    :raises DomainError: If there are fewer than 100 draws or no usable observation.
    """
    loglik = np.asarray(loglik, dtype=float)
    if loglik.ndim != 2:
        raise DomainError("loglik", loglik.shape, "shape (draws, observations)")
    n_draws, n_obs = loglik.shape
    if n_draws < 100:
        raise DomainError("draws", n_draws, ">= 100")

    finite = np.all(np.isfinite(loglik), axis=0)
    excluded = [int(i) for i in np.flatnonzero(~finite)]
    if excluded:
        LOGGER.warning(
            f"{len(excluded)} observations with non-finite log-likelihood excluded from LOO"
        )
    if not finite.any():
        raise DomainError("loglik", "no finite column", "at least one observation")

    idata = az.from_dict(log_likelihood={"y": loglik[None, :, finite]})
    with warnings.catch_warnings():
        # the shape estimates are reported below
        warnings.simplefilter("ignore", category=UserWarning)
        loo = az.loo(idata, pointwise=True, var_name="y", reff=1.0, scale="log")

    pareto_k = np.full(n_obs, np.nan)
    pareto_k[finite] = np.asarray(loo.pareto_k, dtype=float)
    unreliable = int(np.sum(pareto_k[finite] > PARETO_K_WARNING))
    if unreliable:
        LOGGER.warning(f"{unreliable} observations with Pareto k above {PARETO_K_WARNING}")
    return LooResult(
        elpd_loo=float(loo.elpd_loo),
        p_loo=float(loo.p_loo),
        se_loo=float(loo.se),
        pointwise=np.asarray(loo.loo_i, dtype=float),
        pareto_k=pareto_k,
        excluded=excluded,
    )
