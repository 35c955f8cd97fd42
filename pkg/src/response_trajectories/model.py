"""The generative model of outcome trajectories and its joint log density.

An outcome series is a patient-specific Gaussian-process trend plus one bell-shaped response
per reported treatment. Response heights and widths are linear in the (possibly mis-reported)
treatment covariates, with coefficients drawn from shared population distributions in the
hierarchical variants. Treatment times and amounts may carry latent measurement errors.

All density code is written against :mod:`response_trajectories.inference.autodiff` and works on
plain arrays as well as on recorded graph variables.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Sequence

import numpy as np
from scipy.special import expit

from . import gp
from .data import NUTRIENTS, PatientData
from .inference import autodiff as ad
from .inference.params import ParamLayout, ParamVector, Transform, log_jacobian, untransform
from .utils.exceptions import DomainError, StructuralError

LOG_2PI = float(np.log(2.0 * np.pi))
SQRT_2PI = float(np.sqrt(2.0 * np.pi))
LOG_2 = float(np.log(2.0))


class ModelVariant(str, Enum):
    """The four nested model variants."""

    IND = "ind"
    HIER = "hier"
    HIER_TIME = "hier_time"
    HIER_TIME_COV = "hier_time_cov"

    @property
    def hierarchical(self) -> bool:
        return self is not ModelVariant.IND

    @property
    def time_error(self) -> bool:
        return self in (ModelVariant.HIER_TIME, ModelVariant.HIER_TIME_COV)

    @property
    def covariate_error(self) -> bool:
        return self is ModelVariant.HIER_TIME_COV


@dataclass
class ModelSpec:
    """
    The model variant and all of its fixed hyperparameters.

    :ivar variant: Which of the four model variants to use.
    :ivar sigma_x: Prior standard deviation of the log amount errors.
    :ivar sigma_t: Standard deviation of the per-meal time errors (minutes).
    :ivar sigma_d: Prior standard deviation of the per-patient reporting bias (minutes).
    :ivar sigma_y_scale: Half-normal scale of the observation noise.
    :ivar beta_h_tilde_scale: Prior scale of the population height coefficients.
    :ivar beta_l_tilde_scale: Prior scale of the population length-scale coefficients.
    :ivar sigma_h_scale: Half-normal scale of the height coefficient spread.
    :ivar sigma_l_scale: Half-normal scale of the length-scale coefficient spread.
    :ivar ind_beta_scale: Prior scale of the coefficients in the independent variant.
    :ivar se_amplitude_scale: Half-normal scale of the squared-exponential amplitude.
    :ivar const_amplitude_scale: Half-normal scale of the constant kernel amplitude.
    :ivar lengthscale_loc: Log-normal location of the kernel length-scale (log minutes).
    :ivar lengthscale_sd: Log-normal scale of the kernel length-scale.
    :ivar inducing_count: Number of inducing points per patient, capped at its series length.
    :ivar length_scale_floor: Minimum response width (minutes).
    :ivar jitter: Initial diagonal jitter of the inducing covariance.
    """

    variant: ModelVariant = ModelVariant.HIER
    sigma_x: float = 0.1
    sigma_t: float = 10.0
    sigma_d: float = 20.0
    sigma_y_scale: float = 1.0
    beta_h_tilde_scale: float = 1.0
    beta_l_tilde_scale: float = 1.0
    sigma_h_scale: float = 0.5
    sigma_l_scale: float = 0.5
    ind_beta_scale: float = 1.0
    se_amplitude_scale: float = 1.0
    const_amplitude_scale: float = 1.0
    lengthscale_loc: float = float(np.log(120.0))
    lengthscale_sd: float = 0.3
    inducing_count: int = 16
    length_scale_floor: float = 5.0
    jitter: float = 1e-6

    def __post_init__(self) -> None:
        self.variant = ModelVariant(self.variant)
        for name, value in asdict(self).items():
            if name in ("variant", "lengthscale_loc", "inducing_count"):
                continue
            if not (np.isfinite(value) and value > 0):
                raise DomainError(name, value, "> 0")
        if self.inducing_count < 2:
            raise DomainError("inducing_count", self.inducing_count, ">= 2")

    def to_dict(self) -> dict[str, Any]:
        content = asdict(self)
        content["variant"] = self.variant.value
        return content

    @classmethod
    def from_dict(cls, content: dict[str, Any]) -> ModelSpec:
        return cls(**content)

    def inducing_for(self, patient: PatientData) -> gp.InducingSet:
        """The inducing set of one patient: ``min(inducing_count, G)`` points."""
        if patient.n_obs < 2:
            raise DomainError(f"observations of {patient.patient_id}", patient.n_obs, ">= 2")
        return gp.select_inducing(patient.obs_times, min(self.inducing_count, patient.n_obs))


@dataclass
class ResponseCoefficients:
    """Per-patient height and length-scale coefficients."""

    beta_h: Any
    beta_l: Any


@dataclass
class HyperCoefficients:
    """Population means and spreads of the response coefficients."""

    beta_h_tilde: Any
    beta_l_tilde: Any
    sigma_h: Any
    sigma_l: Any

    def __post_init__(self) -> None:
        for name in ("sigma_h", "sigma_l"):
            value = getattr(self, name)
            if not ad.is_recorded(value) and not np.all(np.asarray(value) > 0):
                raise DomainError(name, np.asarray(value).tolist(), "> 0")


@dataclass
class MeasurementLatents:
    """Latent reporting errors of one patient; absent fields count as zero."""

    time_offsets: Any = None
    report_bias: Any = 0.0
    log_amount_errors: Any = None


@dataclass
class PatientState:
    """All parameters of one patient at one point of the posterior."""

    coef: ResponseCoefficients
    kernel: gp.KernelParams
    sigma_y: Any
    latents: MeasurementLatents = field(default_factory=MeasurementLatents)


def _normal_logpdf(x, loc, scale):
    z = (x - loc) / scale
    return -0.5 * LOG_2PI - ad.log(scale) - 0.5 * ad.square(z)


def _halfnormal_logpdf(x, scale: float):
    return LOG_2 - 0.5 * LOG_2PI - np.log(scale) - 0.5 * ad.square(x / scale)


def response_curve(lags, h, l):
    """
    The bell-shaped response ``h·exp(−(Δ − 3l)² / (2l²))``.

    The peak ``h`` is reached ``3l`` after the treatment.

    :param lags: Time since the treatment (minutes).
    :param h: The height.
    :param l: The width (minutes), strictly positive.
    :return: The response at every lag.
    :raises DomainError: If ``l`` is not positive.
    """
    if not ad.is_recorded(l) and not np.all(np.asarray(l) > 0):
        raise DomainError("l", l, "> 0")
    return h * ad.exp(-0.5 * ad.square(lags - 3.0 * l) / ad.square(l))


def response_params(coef: ResponseCoefficients, x_star, floor: float):
    """
    Height and width of the response to a treatment with covariates ``x_star``.

    ``h = beta_hᵀ x*`` and ``l = floor + softplus(beta_lᵀ x*)``. Passing a matrix of covariates
    (one row per treatment) returns one height and width per row.
    """
    h = x_star @ coef.beta_h
    l = floor + ad.softplus(x_star @ coef.beta_l)
    return h, l


def reconstruct_exposures(patient: PatientData, latents: MeasurementLatents, spec: ModelSpec):
    """
    True treatment times and covariates implied by the latent errors.

    ``t* = t − d − ε`` in the time-error variants and ``x* = x / δ`` in the covariate-error
    variant; otherwise the reported values are used.

    :return: The times ``(M,)`` and the covariates ``(M, P)``.
    """
    times = patient.meal_times
    covariates = patient.covariate_matrix
    if spec.variant.time_error:
        times = times - latents.report_bias
        if latents.time_offsets is not None:
            times = times - latents.time_offsets
    if spec.variant.covariate_error and latents.log_amount_errors is not None:
        scale = ad.reshape(ad.exp(-latents.log_amount_errors), (patient.n_meals, 1))
        covariates = covariates * scale
    return times, covariates


def meal_responses(
    patient: PatientData,
    latents: MeasurementLatents,
    coef: ResponseCoefficients,
    spec: ModelSpec,
    times: np.ndarray | None = None,
):
    """The ``(G, M)`` matrix of individual treatment responses at ``times``."""
    times = patient.obs_times if times is None else np.asarray(times, dtype=float)
    t_star, x_star = reconstruct_exposures(patient, latents, spec)
    h, l = response_params(coef, x_star, spec.length_scale_floor)
    lags = times[:, None] - t_star
    return response_curve(lags, h, l)


def sum_responses(
    patient: PatientData,
    latents: MeasurementLatents,
    coef: ResponseCoefficients,
    spec: ModelSpec,
    times: np.ndarray | None = None,
):
    """
    The summed treatment responses at the observation times (or at ``times``).

    :return: One value per time; zeros when the patient has no treatments.
    """
    n_times = patient.n_obs if times is None else len(times)
    if patient.n_meals == 0:
        return np.zeros(n_times)
    return ad.sum(meal_responses(patient, latents, coef, spec, times), axis=1)


def response_area(h, l):
    """
    The integral of the response curve over all lags, ``h·l·√(2π)``.

    :raises DomainError: If ``l`` is not positive.
    """
    if not np.all(np.asarray(l) > 0):
        raise DomainError("l", l, "> 0")
    return h * l * SQRT_2PI


def area_sensitivity(coef: ResponseCoefficients, x_star: np.ndarray, p: int, floor: float) -> float:
    """
    Change of the response area per unit increase of covariate ``p``.

    :param coef: The response coefficients.
    :param x_star: The covariates at which the derivative is taken.
    :param p: The covariate index.
    :param floor: The minimum response width.
    :return: ``√(2π)·(β^h_p·l + h·σ(β_lᵀx*)·β^l_p)``.
    """
    beta_h = np.asarray(coef.beta_h, dtype=float)
    beta_l = np.asarray(coef.beta_l, dtype=float)
    if not 0 <= p < len(beta_h):
        raise DomainError("p", p, f"0 <= p < {len(beta_h)}")
    z = float(beta_l @ x_star)
    h = float(beta_h @ x_star)
    l = floor + float(np.logaddexp(0.0, z))
    return SQRT_2PI * (beta_h[p] * l + h * expit(z) * beta_l[p])


def covariate_labels(dim: int) -> tuple[str, ...]:
    if dim <= len(NUTRIENTS):
        return NUTRIENTS[:dim]
    return tuple(f"x{i}" for i in range(dim))


def build_layout(
    data: Sequence[PatientData], spec: ModelSpec, labels: Sequence[str] | None = None
) -> ParamLayout:
    """
    The parameter layout of a model variant fitted to some patients.

    Population blocks come first, then every patient's coefficients, kernel parameters, noise
    level and latent errors.
    """
    if not data:
        raise StructuralError("no patients")
    dim = data[0].covariate_dim
    if any(p.covariate_dim != dim for p in data):
        raise StructuralError("patients have different covariate dimensions")
    labels = tuple(labels) if labels else covariate_labels(dim)

    layout = ParamLayout()
    if spec.variant.hierarchical:
        layout.add("beta_h_tilde", dim, labels=labels)
        layout.add("beta_l_tilde", dim, labels=labels)
        layout.add("sigma_h", dim, Transform.LOG, labels=labels)
        layout.add("sigma_l", dim, Transform.LOG, labels=labels)
    for patient in data:
        pid = patient.patient_id
        meals = tuple(str(m) for m in range(patient.n_meals))
        layout.add(f"beta_h[{pid}]", dim, labels=labels)
        layout.add(f"beta_l[{pid}]", dim, labels=labels)
        layout.add(f"se_amplitude[{pid}]", 1, Transform.LOG)
        layout.add(f"se_lengthscale[{pid}]", 1, Transform.LOG)
        layout.add(f"const_amplitude[{pid}]", 1, Transform.LOG)
        layout.add(f"sigma_y[{pid}]", 1, Transform.LOG)
        if spec.variant.time_error:
            layout.add(f"report_bias[{pid}]", 1)
            layout.add(f"time_offsets[{pid}]", patient.n_meals, labels=meals)
        if spec.variant.covariate_error:
            layout.add(f"log_amount_errors[{pid}]", patient.n_meals, labels=meals)
    return layout


class TrajectoryPosterior:
    """
    The joint posterior density of one model variant given a set of patients.

    The object owns the parameter layout and the inducing set of every patient, and evaluates
    the log density in the unconstrained space (transform Jacobians included).
    """

    def __init__(
        self,
        data: Sequence[PatientData],
        spec: ModelSpec,
        labels: Sequence[str] | None = None,
    ) -> None:
        self.data = list(data)
        self.spec = spec
        self.layout = build_layout(self.data, spec, labels)
        self.inducing = [spec.inducing_for(patient) for patient in self.data]
        if len({p.patient_id for p in self.data}) != len(self.data):
            raise StructuralError("duplicate patient identifiers")

    @property
    def dim(self) -> int:
        return self.layout.dim

    def names(self) -> list[str]:
        return self.layout.names()

    def initial_point(self) -> np.ndarray:
        """Unconstrained zeros, with the kernel length-scales at their prior location."""
        q = np.zeros(self.dim)
        for patient in self.data:
            q[self.layout[f"se_lengthscale[{patient.patient_id}]"].offset] = self.spec.lengthscale_loc
        return q

    def hyper_coefficients(self, theta) -> HyperCoefficients | None:
        if not self.spec.variant.hierarchical:
            return None
        return HyperCoefficients(
            beta_h_tilde=theta[self.layout["beta_h_tilde"].index],
            beta_l_tilde=theta[self.layout["beta_l_tilde"].index],
            sigma_h=theta[self.layout["sigma_h"].index],
            sigma_l=theta[self.layout["sigma_l"].index],
        )

    def patient_state(self, theta, patient: PatientData) -> PatientState:
        """Reads one patient's parameters from a constrained vector."""
        layout = self.layout
        pid = patient.patient_id

        def scalar(name: str):
            return theta[layout[f"{name}[{pid}]"].offset]

        latents = MeasurementLatents()
        if self.spec.variant.time_error:
            latents.report_bias = scalar("report_bias")
            if f"time_offsets[{pid}]" in layout:
                latents.time_offsets = theta[layout[f"time_offsets[{pid}]"].index]
        if self.spec.variant.covariate_error and f"log_amount_errors[{pid}]" in layout:
            latents.log_amount_errors = theta[layout[f"log_amount_errors[{pid}]"].index]

        return PatientState(
            coef=ResponseCoefficients(
                beta_h=theta[layout[f"beta_h[{pid}]"].index],
                beta_l=theta[layout[f"beta_l[{pid}]"].index],
            ),
            kernel=gp.KernelParams(
                se_amplitude=scalar("se_amplitude"),
                se_lengthscale=scalar("se_lengthscale"),
                const_amplitude=scalar("const_amplitude"),
            ),
            sigma_y=scalar("sigma_y"),
            latents=latents,
        )

    def _log_prior(self, theta, states: list[PatientState]):
        spec = self.spec
        total = 0.0
        hyper = self.hyper_coefficients(theta)
        if hyper is not None:
            total = total + ad.sum(_normal_logpdf(hyper.beta_h_tilde, 0.0, spec.beta_h_tilde_scale))
            total = total + ad.sum(_normal_logpdf(hyper.beta_l_tilde, 0.0, spec.beta_l_tilde_scale))
            total = total + ad.sum(_halfnormal_logpdf(hyper.sigma_h, spec.sigma_h_scale))
            total = total + ad.sum(_halfnormal_logpdf(hyper.sigma_l, spec.sigma_l_scale))

        for state in states:
            coef = state.coef
            if hyper is not None:
                beta_h = _normal_logpdf(coef.beta_h, hyper.beta_h_tilde, hyper.sigma_h)
                beta_l = _normal_logpdf(coef.beta_l, hyper.beta_l_tilde, hyper.sigma_l)
                total = total + ad.sum(beta_h) + ad.sum(beta_l)
            else:
                total = total + ad.sum(_normal_logpdf(coef.beta_h, 0.0, spec.ind_beta_scale))
                total = total + ad.sum(_normal_logpdf(coef.beta_l, 0.0, spec.ind_beta_scale))

            kp = state.kernel
            total = total + _halfnormal_logpdf(kp.se_amplitude, spec.se_amplitude_scale)
            total = total + _halfnormal_logpdf(kp.const_amplitude, spec.const_amplitude_scale)
            log_ell = ad.log(kp.se_lengthscale)
            total = total + _normal_logpdf(log_ell, spec.lengthscale_loc, spec.lengthscale_sd)
            total = total - log_ell
            total = total + _halfnormal_logpdf(state.sigma_y, spec.sigma_y_scale)

            latents = state.latents
            if spec.variant.time_error:
                total = total + _normal_logpdf(latents.report_bias, 0.0, spec.sigma_d)
                if latents.time_offsets is not None:
                    total = total + ad.sum(_normal_logpdf(latents.time_offsets, 0.0, spec.sigma_t))
            if spec.variant.covariate_error and latents.log_amount_errors is not None:
                total = total + ad.sum(_normal_logpdf(latents.log_amount_errors, 0.0, spec.sigma_x))
        return total

    def _log_likelihood(self, states: list[PatientState]):
        total = 0.0
        for patient, inducing, state in zip(self.data, self.inducing, states):
            responses = sum_responses(patient, state.latents, state.coef, self.spec)
            residual = patient.outcome - responses
            total = total + gp.lowrank_marginal_loglik(
                residual, patient.obs_times, inducing, state.kernel, state.sigma_y, self.spec.jitter
            )
        return total

    def _log_density(self, q):
        theta = untransform(q, self.layout)
        states = [self.patient_state(theta, patient) for patient in self.data]
        return self._log_prior(theta, states) + self._log_likelihood(states) + log_jacobian(
            q, self.layout
        )

    def _check(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        self.layout.check(q)
        return q

    def log_density(self, q: np.ndarray) -> float:
        """
        The unconstrained log density at ``q``.

        :return: The log density, or ``-inf`` where it is not finite or the covariance cannot
            be factored.
        """
        return ad.guarded(self._log_density, self._check(q))

    def value_and_grad(self, q: np.ndarray) -> tuple[float, np.ndarray]:
        """The log density and its gradient; ``(-inf, 0)`` where either is not finite."""
        return ad.guarded_value_and_grad(self._log_density, self._check(q))

    def pointwise_loglik(self, q: np.ndarray) -> np.ndarray:
        """
        Leave-one-out log predictive densities of every training observation at ``q``.

        The trend likelihood does not factorize over observations, so each entry is the
        Gaussian-process conditional density of one observation given the others.
        """
        theta = untransform(self._check(q), self.layout)
        values = []
        for patient, inducing in zip(self.data, self.inducing):
            state = self.patient_state(theta, patient)
            residual = patient.outcome - sum_responses(patient, state.latents, state.coef, self.spec)
            with np.errstate(all="ignore"):
                values.append(
                    gp.lowrank_loo_pointwise(
                        residual,
                        patient.obs_times,
                        inducing,
                        state.kernel,
                        state.sigma_y,
                        self.spec.jitter,
                    )
                )
        return np.concatenate(values)


def log_posterior(params: ParamVector, data: Sequence[PatientData], spec: ModelSpec) -> float:
    """
    The joint log posterior density of ``params`` in the unconstrained space.

    :param params: The parameter vector; its layout must match the data and the variant.
    :param data: The patients.
    :param spec: The model.
    :return: The log density, ``-inf`` where it is not finite.
    :raises StructuralError: If the layout does not match.
    """
    posterior = TrajectoryPosterior(data, spec)
    if params.layout.names() != posterior.names():
        raise StructuralError("parameter layout does not match the model and data")
    return posterior.log_density(params.values)
