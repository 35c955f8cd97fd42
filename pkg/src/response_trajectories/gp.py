"""Low-rank Gaussian-process trend with a squared-exponential plus constant kernel.

The trend of each patient is marginalized analytically. With ``Kuu = L Lᵀ`` the Cholesky factor of
the jittered inducing covariance and ``A = L⁻¹ Kug / σ``, the approximate outcome covariance is
``Q + σ²I = σ² (I + Aᵀ A)``. All quantities are obtained from ``B = I + A Aᵀ`` (size ``m × m``),
so nothing of size ``G × G`` is ever formed.

Every function is written against :mod:`response_trajectories.inference.autodiff`, so kernel
parameters, noise level and residual can be plain numbers or recorded graph variables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .inference import autodiff as ad
from .utils.exceptions import CholeskyFailure, DomainError

LOG_2PI = float(np.log(2.0 * np.pi))
MAX_JITTER = 1e-2


@dataclass
class KernelParams:
    """
    Parameters of the squared-exponential plus constant kernel.

    :ivar se_amplitude: Amplitude of the squared-exponential component (outcome units).
    :ivar se_lengthscale: Length-scale of the squared-exponential component (minutes).
    :ivar const_amplitude: Amplitude of the constant component (outcome units).
    """

    se_amplitude: Any
    se_lengthscale: Any
    const_amplitude: Any = 0.0

    def __post_init__(self) -> None:
        if not ad.is_recorded(self.se_amplitude) and not self.se_amplitude > 0:
            raise DomainError("se_amplitude", self.se_amplitude, "> 0")
        if not ad.is_recorded(self.se_lengthscale) and not self.se_lengthscale > 0:
            raise DomainError("se_lengthscale", self.se_lengthscale, "> 0")
        if not ad.is_recorded(self.const_amplitude) and not self.const_amplitude >= 0:
            raise DomainError("const_amplitude", self.const_amplitude, ">= 0")

    def to_dict(self) -> dict[str, float]:
        return {
            "se_amplitude": float(ad.value_of(self.se_amplitude)),
            "se_lengthscale": float(ad.value_of(self.se_lengthscale)),
            "const_amplitude": float(ad.value_of(self.const_amplitude)),
        }


@dataclass(frozen=True)
class InducingSet:
    """A subset of a patient's observation times anchoring the low-rank approximation."""

    locations: np.ndarray
    indices: np.ndarray

    def __post_init__(self) -> None:
        if len(self.locations) < 2:
            raise DomainError("inducing locations", len(self.locations), ">= 2 points")
        if np.any(np.diff(self.locations) <= 0):
            raise DomainError("inducing locations", self.locations.tolist(), "strictly increasing")

    def __len__(self) -> int:
        return len(self.locations)


def kernel(t1: np.ndarray, t2: np.ndarray, kp: KernelParams):
    """
    Evaluates the kernel matrix between two sets of times.

    :param t1: First set of times (minutes).
    :param t2: Second set of times (minutes).
    :param kp: The kernel parameters.
    :return: The matrix ``a²·exp(−(t1_i − t2_j)²/(2ℓ²)) + c²``.
    """
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    sq_dist = np.square(t1[:, None] - t2[None, :])
    scale = -0.5 / ad.square(kp.se_lengthscale)
    return ad.square(kp.se_amplitude) * ad.exp(sq_dist * scale) + ad.square(kp.const_amplitude)


def select_inducing(obs_times: np.ndarray, m: int) -> InducingSet:
    """
    Picks ``m`` observation times on an even index grid.

    The grid ``linspace(0, G − 1, m)`` is rounded to indices; duplicates are dropped and the set
    is padded with the first unused indices until it holds ``m`` points.

    :param obs_times: The strictly increasing observation times.
    :param m: The number of inducing points.
    :return: The inducing set.
    :raises DomainError: If ``m`` is not between 2 and the number of observations.
    """
    obs_times = np.asarray(obs_times, dtype=float)
    n_obs = len(obs_times)
    if not 2 <= m <= n_obs:
        raise DomainError("m", m, f"2 <= m <= {n_obs}")
    indices = np.unique(np.rint(np.linspace(0, n_obs - 1, m)).astype(int))
    if len(indices) < m:
        unused = np.setdiff1d(np.arange(n_obs), indices)
        indices = np.sort(np.concatenate([indices, unused[: m - len(indices)]]))
    return InducingSet(locations=obs_times[indices], indices=indices)


def factor(matrix, jitter: float = 1e-6):
    """
    Cholesky factor of ``matrix + jitter·I`` with jitter escalation.

    The jitter is multiplied by ten after every failure, up to ``1e-2``.

    :param matrix: A symmetric matrix, plain or recorded.
    :param jitter: The initial jitter.
    :return: The lower Cholesky factor.
    :raises CholeskyFailure: If the matrix stays indefinite at the largest jitter.
    """
    size = ad.value_of(matrix).shape[0]
    eye = np.eye(size)
    current = jitter
    while True:
        try:
            return ad.cholesky(matrix + current * eye)
        except np.linalg.LinAlgError:
            if current >= MAX_JITTER:
                raise CholeskyFailure(size, current) from None
            current = min(max(current, 1e-12) * 10.0, MAX_JITTER)


def _lowrank_factors(obs_times, inducing: InducingSet, kp: KernelParams, sigma_y, jitter: float):
    kuu = kernel(inducing.locations, inducing.locations, kp)
    kug = kernel(inducing.locations, obs_times, kp)
    chol_uu = factor(kuu, jitter)
    a = ad.solve_triangular(chol_uu, kug) / sigma_y
    b = a @ a.T + np.eye(len(inducing))
    chol_b = factor(b, 0.0)
    return chol_uu, a, chol_b


def lowrank_marginal_loglik(
    residual,
    obs_times: np.ndarray,
    inducing: InducingSet,
    kp: KernelParams,
    sigma_y,
    jitter: float = 1e-6,
):
    """
    Log density of the residual under ``N(0, Q + σ²I)`` with ``Q = Kgu Kuu⁻¹ Kug``.

    Uses the Woodbury identity and the matrix determinant lemma; the cost is ``O(G m²)``.

    :param residual: The outcome minus the summed treatment responses.
    :param obs_times: The observation times of the residual.
    :param inducing: The inducing set.
    :param kp: The kernel parameters.
    :param sigma_y: The observation noise standard deviation.
    :param jitter: The initial diagonal jitter of ``Kuu``.
    :return: The log marginal likelihood.
    """
    if not ad.is_recorded(sigma_y) and not sigma_y > 0:
        raise DomainError("sigma_y", sigma_y, "> 0")
    n_obs = len(obs_times)
    _, a, chol_b = _lowrank_factors(obs_times, inducing, kp, sigma_y, jitter)
    c = ad.solve_triangular(chol_b, a @ residual) / sigma_y
    logdet = 2.0 * ad.sum(ad.log(ad.diagonal(chol_b))) + 2.0 * n_obs * ad.log(sigma_y)
    quad = ad.sum(ad.square(residual)) / ad.square(sigma_y) - ad.sum(ad.square(c))
    return -0.5 * (n_obs * LOG_2PI + logdet + quad)


def trend_posterior(
    residual: np.ndarray,
    obs_times: np.ndarray,
    query_times: np.ndarray,
    inducing: InducingSet,
    kp: KernelParams,
    sigma_y: float,
    jitter: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Posterior mean and pointwise variance of the trend at query times.

    :param residual: The outcome minus the summed treatment responses.
    :param obs_times: The observation times of the residual.
    :param query_times: Where to evaluate the posterior.
    :param inducing: The inducing set.
    :param kp: The kernel parameters.
    :param sigma_y: The observation noise standard deviation.
    :param jitter: The initial diagonal jitter of ``Kuu``.
    :return: The mean and the variance (clamped at zero) at every query time.
    """
    query_times = np.asarray(query_times, dtype=float)
    chol_uu, a, chol_b = _lowrank_factors(obs_times, inducing, kp, sigma_y, jitter)
    c = ad.solve_triangular(chol_b, a @ np.asarray(residual, dtype=float)) / sigma_y
    w = ad.solve_triangular(chol_uu, kernel(inducing.locations, query_times, kp))
    tmp = ad.solve_triangular(chol_b, w)
    mean = tmp.T @ c
    prior_var = np.square(kp.se_amplitude) + np.square(kp.const_amplitude)
    var = prior_var - np.sum(np.square(w), axis=0) + np.sum(np.square(tmp), axis=0)
    return mean, np.maximum(var, 0.0)


def lowrank_loo_pointwise(
    residual: np.ndarray,
    obs_times: np.ndarray,
    inducing: InducingSet,
    kp: KernelParams,
    sigma_y: float,
    jitter: float = 1e-6,
) -> np.ndarray:
    """
    Leave-one-out log predictive densities ``log p(r_i | r_−i)`` under ``N(0, Q + σ²I)``.

    With ``C`` the precision matrix, the conditional of ``r_i`` has mean ``r_i − (C r)_i / C_ii``
    and variance ``1 / C_ii``. The diagonal of ``C`` is read from the Woodbury form.

    :return: One log density per observation.
    """
    residual = np.asarray(residual, dtype=float)
    _, a, chol_b = _lowrank_factors(obs_times, inducing, kp, sigma_y, jitter)
    v = ad.solve_triangular(chol_b, a)
    precision_diag = (1.0 - np.sum(np.square(v), axis=0)) / sigma_y**2
    precision_r = (residual - v.T @ (v @ residual)) / sigma_y**2
    return -0.5 * (LOG_2PI - np.log(precision_diag) + np.square(precision_r) / precision_diag)


def sample_prior(
    times: np.ndarray, kp: KernelParams, rng: np.random.Generator, jitter: float = 1e-6
) -> np.ndarray:
    """
    Draws one trend from the zero-mean GP prior on a grid of times.

    :param times: The grid.
    :param kp: The kernel parameters.
    :param rng: The random generator.
    :param jitter: The initial diagonal jitter.
    :return: The sampled trend.
    """
    chol = factor(kernel(times, times, kp), jitter)
    return chol @ rng.standard_normal(len(times))
