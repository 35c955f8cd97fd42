"""Synthetic datasets with known treatment responses and reporting errors.

Three protocols are supported:

* ``toy``: a linear (or GP) trend plus responses to meals with two covariates, where a share of
  the reported covariate entries carries an additive ``N(1, 0.2²)`` error;
* ``from_fit``: responses and trends replayed from a fitted posterior, with amplified responses
  and a share of meals whose amounts are misreported by a log-normal factor;
* ``generative``: every parameter and latent error drawn from the model priors.

Reported meal times can in addition be shifted systematically and jittered per meal.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gp
from .data import (
    MINUTES_PER_DAY,
    TEST_DAYS,
    TRAIN_DAYS,
    PatientData,
    Standardizer,
    TreatmentEvent,
    write_dataset,
)
from .inference.nuts import PosteriorDraws
from .model import MeasurementLatents, ModelSpec, ResponseCoefficients, sum_responses
from .utils.exceptions import DomainError, SamplerFailure
from .utils.logger import LOGGER


class SimProtocol(str, Enum):
    TOY = "toy"
    FROM_FIT = "from_fit"
    GENERATIVE = "generative"


class TrendKind(str, Enum):
    LINEAR = "linear"
    GP = "gp"


@dataclass
class SimConfig:
    """
    Settings of a simulation.

    :ivar protocol: Which generator to use.
    :ivar n_patients: Number of simulated patients.
    :ivar meals_per_patient: Meals per patient over the whole series.
    :ivar covariate_dim: Covariates per meal.
    :ivar perturb_fraction: Share of covariate entries (toy) or meals (from_fit) misreported.
    :ivar perturb_sd: Log-normal standard deviation of misreported amounts (from_fit).
    :ivar response_scale: Factor applied to the response heights (from_fit).
    :ivar trend: The trend of the toy protocol.
    :ivar seed: Seed of the random stream.
    :ivar days: Length of the series in days.
    :ivar cadence: Minutes between observations.
    :ivar noise_sd: Observation noise of the toy protocol.
    :ivar trend_slope: Slope of the linear toy trend (per minute).
    :ivar trend_intercept: Intercept of the linear toy trend.
    :ivar trend_amplitude: Amplitude of the GP toy trend.
    :ivar trend_lengthscale: Length-scale of the GP toy trend (minutes).
    :ivar toy_shift_mean: Mean of the additive covariate error of the toy protocol.
    :ivar toy_shift_sd: Standard deviation of the additive covariate error of the toy protocol.
    :ivar toy_beta_h: Height coefficients of the toy protocol.
    :ivar toy_beta_l: Length-scale coefficients of the toy protocol.
    :ivar coefficient_sd: Relative spread of the toy coefficients between patients.
    :ivar time_shift: Systematic delay of every reported meal time (minutes).
    :ivar time_jitter_sd: Standard deviation of per-meal reporting jitter (minutes).
    :ivar use_posterior_mean: Replay the posterior mean rather than a random draw (from_fit).
    """

    protocol: SimProtocol = SimProtocol.TOY
    n_patients: int = 2
    meals_per_patient: int = 10
    covariate_dim: int = 2
    perturb_fraction: float = 0.5
    perturb_sd: float = 0.2
    response_scale: float = 5.0
    trend: TrendKind = TrendKind.LINEAR
    seed: int = 0
    days: int = 3
    cadence: float = 15.0
    noise_sd: float = 0.1
    trend_slope: float = 0.001
    trend_intercept: float = 0.0
    trend_amplitude: float = 0.5
    trend_lengthscale: float = 120.0
    toy_shift_mean: float = 1.0
    toy_shift_sd: float = 0.2
    toy_beta_h: tuple[float, ...] = (1.0, 0.5)
    toy_beta_l: tuple[float, ...] = (6.0, 3.0)
    coefficient_sd: float = 0.1
    time_shift: float = 0.0
    time_jitter_sd: float = 0.0
    use_posterior_mean: bool = True

    def __post_init__(self) -> None:
        self.protocol = SimProtocol(self.protocol)
        self.trend = TrendKind(self.trend)
        self.toy_beta_h = tuple(float(v) for v in self.toy_beta_h)
        self.toy_beta_l = tuple(float(v) for v in self.toy_beta_l)
        checks = {
            "n_patients": self.n_patients >= 1,
            "meals_per_patient": self.meals_per_patient >= 0,
            "covariate_dim": self.covariate_dim >= 1,
            "perturb_fraction": 0.0 <= self.perturb_fraction <= 1.0,
            "perturb_sd": self.perturb_sd >= 0.0,
            "response_scale": self.response_scale > 0.0,
            "days": self.days >= 1,
            "cadence": self.cadence > 0.0,
            "noise_sd": self.noise_sd >= 0.0,
            "toy_shift_sd": self.toy_shift_sd >= 0.0,
            "coefficient_sd": self.coefficient_sd >= 0.0,
            "time_jitter_sd": self.time_jitter_sd >= 0.0,
        }
        for name, valid in checks.items():
            if not valid:
                raise DomainError(name, getattr(self, name), "a valid simulation setting")

    def to_dict(self) -> dict:
        content = asdict(self)
        content["protocol"] = self.protocol.value
        content["trend"] = self.trend.value
        content["toy_beta_h"] = list(self.toy_beta_h)
        content["toy_beta_l"] = list(self.toy_beta_l)
        return content


@dataclass
class PatientTruth:
    """
    What generated one simulated patient.

    :ivar perturbed: ``(M, P)`` mask of the misreported covariate entries.
    :ivar log_delta: Per-meal log factor between reported and true amounts.
    :ivar time_error: Per-meal difference between reported and true time.
    """

    patient_id: str
    beta_h: np.ndarray
    beta_l: np.ndarray
    meal_times: np.ndarray
    covariates: np.ndarray
    perturbed: np.ndarray
    log_delta: np.ndarray
    time_error: np.ndarray
    trend: dict = field(default_factory=dict)
    noise_sd: float = 0.0

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "beta_h": self.beta_h.tolist(),
            "beta_l": self.beta_l.tolist(),
            "meal_times": self.meal_times.tolist(),
            "covariates": self.covariates.tolist(),
            "perturbed": self.perturbed.tolist(),
            "log_delta": self.log_delta.tolist(),
            "time_error": self.time_error.tolist(),
            "trend": self.trend,
            "noise_sd": self.noise_sd,
        }

    @classmethod
    def from_dict(cls, content: dict) -> PatientTruth:
        dim = len(content["beta_h"])
        return cls(
            patient_id=content["patient_id"],
            beta_h=np.asarray(content["beta_h"], dtype=float),
            beta_l=np.asarray(content["beta_l"], dtype=float),
            meal_times=np.asarray(content["meal_times"], dtype=float),
            covariates=np.asarray(content["covariates"], dtype=float).reshape(-1, dim),
            perturbed=np.asarray(content["perturbed"], dtype=bool).reshape(-1, dim),
            log_delta=np.asarray(content["log_delta"], dtype=float),
            time_error=np.asarray(content["time_error"], dtype=float),
            trend=dict(content.get("trend", {})),
            noise_sd=float(content.get("noise_sd", 0.0)),
        )


@dataclass
class GroundTruth:
    protocol: SimProtocol
    patients: list[PatientTruth]
    config: dict = field(default_factory=dict)

    def heights(self) -> np.ndarray:
        """The height coefficients of all patients, concatenated."""
        return np.concatenate([p.beta_h for p in self.patients])

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol.value,
            "config": self.config,
            "patients": [p.to_dict() for p in self.patients],
        }

    @classmethod
    def from_dict(cls, content: dict) -> GroundTruth:
        return cls(
            SimProtocol(content["protocol"]),
            [PatientTruth.from_dict(p) for p in content["patients"]],
            dict(content.get("config", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> GroundTruth:
        with open(path) as file:
            return cls.from_dict(json.load(file))


def _grid(cfg: SimConfig) -> np.ndarray:
    return np.arange(0.0, cfg.days * MINUTES_PER_DAY, cfg.cadence)


def _split_masks(times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    day = np.floor(times / MINUTES_PER_DAY)
    return np.isin(day, TRAIN_DAYS), np.isin(day, TEST_DAYS)


def _meal_times(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    end = cfg.days * MINUTES_PER_DAY - 240.0
    return np.sort(np.round(rng.uniform(60.0, end, cfg.meals_per_patient)))


def _report_times(true_times: np.ndarray, cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    jitter = rng.normal(0.0, cfg.time_jitter_sd, len(true_times)) if cfg.time_jitter_sd else 0.0
    return true_times + cfg.time_shift + jitter


def _in_report_order(reported_times: np.ndarray, *arrays: np.ndarray) -> list[np.ndarray]:
    order = np.argsort(reported_times, kind="stable")
    return [reported_times[order], *(array[order] for array in arrays)]


def _responses(times, meal_times, covariates, beta_h, beta_l, spec: ModelSpec) -> np.ndarray:
    patient = PatientData(
        outcome=np.zeros(len(times)),
        obs_times=times,
        events=[TreatmentEvent(float(t), x) for t, x in zip(meal_times, covariates)],
        covariate_dim=covariates.shape[1],
    )
    coef = ResponseCoefficients(np.asarray(beta_h, float), np.asarray(beta_l, float))
    return sum_responses(patient, MeasurementLatents(), coef, spec)


def _patient(pid, times, outcome, report_times, reported, origin=0.0) -> PatientData:
    train, test = _split_masks(times)
    return PatientData(
        outcome=outcome,
        obs_times=times,
        events=[TreatmentEvent(float(t), x) for t, x in zip(report_times, reported)],
        train_mask=train,
        patient_id=pid,
        test_mask=test,
        covariate_dim=reported.shape[1],
        origin=origin,
    )


def simulate_toy(
    cfg: SimConfig, spec: ModelSpec | None = None
) -> tuple[list[PatientData], GroundTruth]:
    """
    Linear trend plus responses, with additive errors on a share of the reported covariates.

    Exactly ``round(perturb_fraction · M · P)`` covariate entries of every patient are
    perturbed.

    :param cfg: The simulation settings.
    :param spec: Supplies the response width floor. Defaults to the default model.
    :return: The patients and the ground truth.
    """
    spec = spec or ModelSpec()
    rng = np.random.default_rng(cfg.seed)
    dim = cfg.covariate_dim
    base_h = np.resize(np.asarray(cfg.toy_beta_h), dim)
    base_l = np.resize(np.asarray(cfg.toy_beta_l), dim)
    times = _grid(cfg)

    data, truths = [], []
    for n in range(cfg.n_patients):
        pid = f"p{n:02d}"
        beta_h = base_h * (1.0 + cfg.coefficient_sd * rng.standard_normal(dim))
        beta_l = base_l * (1.0 + cfg.coefficient_sd * rng.standard_normal(dim))
        true_times = _meal_times(cfg, rng)
        true_x = rng.uniform(0.5, 1.5, (cfg.meals_per_patient, dim))

        n_entries = true_x.size
        count = int(round(cfg.perturb_fraction * n_entries))
        mask = np.zeros(n_entries, dtype=bool)
        mask[rng.choice(n_entries, size=count, replace=False)] = True
        mask = mask.reshape(true_x.shape)
        shift = rng.normal(cfg.toy_shift_mean, cfg.toy_shift_sd, true_x.shape)
        reported_x = np.where(mask, true_x + shift, true_x)
        reported_times = _report_times(true_times, cfg, rng)

        if cfg.trend is TrendKind.LINEAR:
            trend = cfg.trend_slope * times + cfg.trend_intercept
            trend_info = {"kind": "linear", "slope": cfg.trend_slope, "intercept": cfg.trend_intercept}
        else:
            kp = gp.KernelParams(cfg.trend_amplitude, cfg.trend_lengthscale, 0.0)
            trend = cfg.trend_intercept + gp.sample_prior(times, kp, rng)
            trend_info = {"kind": "gp", **kp.to_dict(), "intercept": cfg.trend_intercept}

        responses = _responses(times, true_times, true_x, beta_h, beta_l, spec)
        noise = rng.normal(0.0, cfg.noise_sd, len(times)) if cfg.noise_sd else 0.0
        outcome = trend + responses + noise

        reported_times, true_times, true_x, reported_x, mask = _in_report_order(
            reported_times, true_times, true_x, reported_x, mask
        )
        data.append(_patient(pid, times, outcome, reported_times, reported_x))
        truths.append(
            PatientTruth(
                pid, beta_h, beta_l, true_times, true_x, mask,
                log_delta=np.zeros(cfg.meals_per_patient),
                time_error=reported_times - true_times,
                trend=trend_info,
                noise_sd=cfg.noise_sd,
            )
        )

    LOGGER.configure("simulate")
    LOGGER.info(f"toy protocol: {cfg.n_patients} patients, {cfg.meals_per_patient} meals each")
    return data, GroundTruth(SimProtocol.TOY, truths, cfg.to_dict())


def _draw_values(posterior: PosteriorDraws, cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    if posterior.n_chains * posterior.n_draws == 0:
        raise SamplerFailure("the posterior holds no draws")
    if cfg.use_posterior_mean:
        return posterior.mean()
    flat = posterior.flat()
    return flat[rng.integers(len(flat))]


def _read(posterior: PosteriorDraws, theta: np.ndarray, name: str) -> np.ndarray:
    if posterior.layout is None:
        raise DomainError("posterior", "without layout", "a fitted model posterior")
    return theta[posterior.layout[name].index]


def _misreport_amounts(
    true_x: np.ndarray, cfg: SimConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    n_meals = len(true_x)
    count = int(round(cfg.perturb_fraction * n_meals))
    chosen = rng.choice(n_meals, size=count, replace=False)
    log_delta = np.zeros(n_meals)
    log_delta[chosen] = rng.normal(0.0, cfg.perturb_sd, count)
    return true_x * np.exp(log_delta)[:, None], log_delta


def simulate_from_fit(
    posterior: PosteriorDraws,
    template: Sequence[PatientData],
    cfg: SimConfig,
    spec: ModelSpec | None = None,
) -> tuple[list[PatientData], GroundTruth]:
    """
    Replays a fitted model with amplified responses and misreported meal amounts.

    For every template patient (up to ``n_patients``) one posterior point supplies the
    coefficients, the kernel and the noise level. The template's reported meals are taken as the
    true meals; heights are multiplied by ``response_scale``, a trend is drawn from the fitted
    kernel, and exactly ``round(perturb_fraction · M)`` meals get their amounts multiplied by
    ``δ ~ LogNormal(0, perturb_sd²)``.

    :param posterior: Draws of a fitted model, with its layout.
    :param template: The patients the model was fitted to.
    :param cfg: The simulation settings.
    :param spec: Supplies the response width floor and kernel jitter.
    :return: The patients and the ground truth.
    """
    spec = spec or ModelSpec()
    rng = np.random.default_rng(cfg.seed)
    theta = _draw_values(posterior, cfg, rng)

    data, truths = [], []
    for patient in list(template)[: cfg.n_patients]:
        pid = patient.patient_id
        beta_h = _read(posterior, theta, f"beta_h[{pid}]") * cfg.response_scale
        beta_l = _read(posterior, theta, f"beta_l[{pid}]")
        kp = gp.KernelParams(
            float(_read(posterior, theta, f"se_amplitude[{pid}]")[0]),
            float(_read(posterior, theta, f"se_lengthscale[{pid}]")[0]),
            float(_read(posterior, theta, f"const_amplitude[{pid}]")[0]),
        )
        sigma_y = float(_read(posterior, theta, f"sigma_y[{pid}]")[0])

        times = patient.obs_times
        true_times = patient.meal_times
        true_x = patient.covariate_matrix
        reported_x, log_delta = _misreport_amounts(true_x, cfg, rng)
        reported_times = _report_times(true_times, cfg, rng)

        trend = gp.sample_prior(times, kp, rng, spec.jitter)
        responses = _responses(times, true_times, true_x, beta_h, beta_l, spec)
        outcome = trend + responses + rng.normal(0.0, sigma_y, len(times))

        reported_times, true_times, true_x, reported_x, log_delta = _in_report_order(
            reported_times, true_times, true_x, reported_x, log_delta
        )
        data.append(_patient(pid, times, outcome, reported_times, reported_x, patient.origin))
        truths.append(
            PatientTruth(
                pid, beta_h, beta_l, true_times, true_x,
                perturbed=np.repeat((log_delta != 0)[:, None], true_x.shape[1], axis=1),
                log_delta=log_delta,
                time_error=reported_times - true_times,
                trend={"kind": "gp", **kp.to_dict()},
                noise_sd=sigma_y,
            )
        )

    LOGGER.configure("simulate")
    LOGGER.info(f"from_fit protocol: {len(data)} patients, response scale {cfg.response_scale:g}")
    return data, GroundTruth(SimProtocol.FROM_FIT, truths, cfg.to_dict())


def _halfnormal(scale: float, rng: np.random.Generator, size=None):
    return np.abs(rng.normal(0.0, scale, size))


def simulate_generative(
    spec: ModelSpec,
    template: Sequence[PatientData] | None,
    cfg: SimConfig,
) -> tuple[list[PatientData], GroundTruth]:
    """
    Draws a dataset from the priors of a model.

    Population and patient coefficients, kernel parameters, noise levels and, depending on the
    variant, reporting errors are drawn from their priors. Reported meals come from the template
    (or from random meals with covariates in ``[0.5, 1.5]`` when no template is given), and the
    true meals are reconstructed from them through the drawn errors.

    :param spec: The model whose priors are used.
    :param template: Patients providing observation times and reported meals.
    :param cfg: The simulation settings.
    :return: The patients and the ground truth.
    """
    rng = np.random.default_rng(cfg.seed)
    variant = spec.variant
    if template is None:
        times = _grid(cfg)
        template = []
        for n in range(cfg.n_patients):
            x = rng.uniform(0.5, 1.5, (cfg.meals_per_patient, cfg.covariate_dim))
            template.append(_patient(f"p{n:02d}", times, np.zeros(len(times)), _meal_times(cfg, rng), x))
    template = list(template)[: cfg.n_patients]
    dim = template[0].covariate_dim

    if variant.hierarchical:
        beta_h_tilde = rng.normal(0.0, spec.beta_h_tilde_scale, dim)
        beta_l_tilde = rng.normal(0.0, spec.beta_l_tilde_scale, dim)
        sigma_h = _halfnormal(spec.sigma_h_scale, rng, dim)
        sigma_l = _halfnormal(spec.sigma_l_scale, rng, dim)
    else:
        beta_h_tilde = beta_l_tilde = np.zeros(dim)
        sigma_h = sigma_l = np.full(dim, spec.ind_beta_scale)

    data, truths = [], []
    for patient in template:
        n_meals = patient.n_meals
        beta_h = rng.normal(beta_h_tilde, sigma_h)
        beta_l = rng.normal(beta_l_tilde, sigma_l)
        kp = gp.KernelParams(
            float(_halfnormal(spec.se_amplitude_scale, rng)) + 1e-12,
            float(np.exp(rng.normal(spec.lengthscale_loc, spec.lengthscale_sd))),
            float(_halfnormal(spec.const_amplitude_scale, rng)),
        )
        sigma_y = float(_halfnormal(spec.sigma_y_scale, rng)) + 1e-12

        reported_times = patient.meal_times
        reported_x = patient.covariate_matrix
        time_error = np.zeros(n_meals)
        log_delta = np.zeros(n_meals)
        if variant.time_error:
            time_error = rng.normal(0.0, spec.sigma_d) + rng.normal(0.0, spec.sigma_t, n_meals)
        if variant.covariate_error:
            log_delta = rng.normal(0.0, spec.sigma_x, n_meals)
        true_times = reported_times - time_error
        true_x = reported_x / np.exp(log_delta)[:, None]

        times = patient.obs_times
        trend = gp.sample_prior(times, kp, rng, spec.jitter)
        responses = _responses(times, true_times, true_x, beta_h, beta_l, spec)
        outcome = trend + responses + rng.normal(0.0, sigma_y, len(times))

        data.append(
            _patient(patient.patient_id, times, outcome, reported_times, reported_x, patient.origin)
        )
        truths.append(
            PatientTruth(
                patient.patient_id, beta_h, beta_l, true_times, true_x,
                perturbed=np.repeat((log_delta != 0)[:, None], dim, axis=1),
                log_delta=log_delta,
                time_error=time_error,
                trend={"kind": "gp", **kp.to_dict()},
                noise_sd=sigma_y,
            )
        )

    LOGGER.configure("simulate")
    LOGGER.info(f"generative protocol: {len(data)} patients from the {variant.value} priors")
    return data, GroundTruth(SimProtocol.GENERATIVE, truths, cfg.to_dict())


def restore_scale(
    data: Sequence[PatientData], truth: GroundTruth, standardizer: Standardizer
) -> tuple[list[PatientData], GroundTruth]:
    """
    Maps a dataset simulated on the standardized scale of a fit back to the original units.

    Outcomes get the patient's centre and the outcome scale back, covariates their scale, and the
    true coefficients, kernel amplitudes and noise level are expressed per original unit.
    """
    scales = standardizer.covariate_scales
    restored = []
    for patient in data:
        events = [
            TreatmentEvent(event.observed_time, event.covariates * scales) for event in patient.events
        ]
        outcome = standardizer.restore_outcome(patient.patient_id, patient.outcome)
        restored.append(replace(patient, outcome=outcome, events=events))

    truths = []
    for item in truth.patients:
        beta_h, beta_l = standardizer.restore_coefficients(item.beta_h, item.beta_l)
        trend = dict(item.trend)
        for key in ("se_amplitude", "const_amplitude"):
            if key in trend:
                trend[key] = trend[key] * standardizer.outcome_scale
        truths.append(
            replace(
                item,
                beta_h=beta_h,
                beta_l=beta_l,
                covariates=item.covariates * scales,
                trend=trend,
                noise_sd=item.noise_sd * standardizer.outcome_scale,
            )
        )
    return restored, GroundTruth(truth.protocol, truths, truth.config)


def write_simulation(
    data: Sequence[PatientData],
    truth: GroundTruth,
    directory: str | Path,
    covariates: Sequence[str] | None = None,
) -> dict[str, Path]:
    """
    Writes a simulated dataset in the ingestion schema plus ``truth.json``.

    :param covariates: The nutrient columns holding the covariates; see :func:`write_dataset`.
    :return: The paths of the written files, keyed by name.
    """
    directory = Path(directory)
    glucose, meals = write_dataset(data, directory, covariates)
    truth_path = directory / "truth.json"
    with open(truth_path, "w") as file:
        json.dump(truth.to_dict(), file, indent=2)
    return {"glucose": glucose, "meals": meals, "truth": truth_path}
