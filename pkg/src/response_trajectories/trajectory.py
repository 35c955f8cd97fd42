"""Posterior trajectories: trend, summed responses, totals and predictive bands."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd

from . import gp
from .data import PatientData, Standardizer
from .inference.nuts import PosteriorDraws
from .model import MeasurementLatents, ModelSpec, TrajectoryPosterior, sum_responses
from .utils.exceptions import StructuralError
from .utils.logger import LOGGER

TRAJECTORY_COLUMNS = (
    "patient_id",
    "time_min",
    "split",
    "glucose",
    "trend_mean",
    "response_mean",
    "total_mean",
    "total_q05",
    "total_q95",
)


@dataclass
class PatientTrajectory:
    """
    Posterior summaries of one patient's trajectory at every observation time.

    All values are on the original outcome scale.

    :ivar times: Minutes from the first observation.
    :ivar meal_times: Reported times of all meals, training and test.
    :ivar trend: Posterior mean of the trend.
    :ivar responses: Posterior mean of the summed treatment responses.
    :ivar total: Posterior mean of trend plus responses.
    :ivar lower: 5% quantile of the posterior predictive distribution.
    :ivar upper: 95% quantile of the posterior predictive distribution.
    """

    patient_id: str
    times: np.ndarray
    outcome: np.ndarray
    train_mask: np.ndarray
    test_mask: np.ndarray
    meal_times: np.ndarray
    trend: np.ndarray
    responses: np.ndarray
    total: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    origin: float = 0.0

    def frame(self, split: str | None = None) -> pd.DataFrame:
        """
        The trajectory as a table with absolute times.

        :param split: ``"train"`` or ``"test"`` to keep only those points.
        """
        labels = np.where(self.train_mask, "train", np.where(self.test_mask, "test", "none"))
        table = pd.DataFrame(
            {
                "patient_id": self.patient_id,
                "time_min": self.times + self.origin,
                "split": labels,
                "glucose": self.outcome,
                "trend_mean": self.trend,
                "response_mean": self.responses,
                "total_mean": self.total,
                "total_q05": self.lower,
                "total_q95": self.upper,
            },
            columns=list(TRAJECTORY_COLUMNS),
        )
        if split is not None:
            table = table[table["split"] == split]
        return table


def thinned_indices(n_total: int, n_samples: int) -> np.ndarray:
    """At most ``n_samples`` evenly spaced draw indices."""
    count = min(n_samples, n_total)
    return np.unique(np.rint(np.linspace(0, n_total - 1, count)).astype(int))


def _check_names(posterior: TrajectoryPosterior, draws: PosteriorDraws) -> None:
    if posterior.names() != list(draws.names):
        raise StructuralError("the draws do not belong to this model and data")


def posterior_trajectories(
    draws: PosteriorDraws,
    data: Sequence[PatientData],
    spec: ModelSpec,
    standardizer: Standardizer | None = None,
    n_samples: int = 200,
    seed: int = 0,
    labels: Sequence[str] | None = None,
) -> list[PatientTrajectory]:
    """
    Evaluates the fitted trajectories at every observation time, test points included.

    The trend is the Gaussian-process posterior given the training residual. Training meals use
    their latent corrections; meals after the training period use the reported times and
    amounts.

    :param draws: The posterior draws of a model fitted to the training part of ``data``.
    :param data: The patients on the original scale, training and test points.
    :param spec: The fitted model.
    :param standardizer: The scaling applied before fitting. Defaults to none.
    :param n_samples: Number of thinned draws to evaluate.
    :param seed: Seed of the predictive noise used for the bands.
    :param labels: The covariate labels the model was fitted with.
    :return: One trajectory per patient.
    """
    data = list(data)
    standardizer = standardizer or Standardizer.identity(data)
    scaled = standardizer.apply(data)
    training = [patient.training() for patient in scaled]
    posterior = TrajectoryPosterior(training, spec, labels)
    _check_names(posterior, draws)

    flat = draws.flat()
    indices = thinned_indices(len(flat), n_samples)
    rng = np.random.default_rng(seed)
    LOGGER.configure("trajectory")
    LOGGER.info(f"Evaluating {len(indices)} draws for {len(data)} patients")

    out = []
    for original, full, train, inducing in zip(data, scaled, training, posterior.inducing):
        _, test_events = full.split_events()
        upcoming = replace(full, events=test_events)
        times = full.obs_times
        trends, responses, predictive = [], [], []
        for index in indices:
            state = posterior.patient_state(flat[index], train)
            residual = train.outcome - sum_responses(train, state.latents, state.coef, spec)
            mean, var = gp.trend_posterior(
                residual, train.obs_times, times, inducing, state.kernel, state.sigma_y, spec.jitter
            )
            response = sum_responses(train, state.latents, state.coef, spec, times)
            if test_events:
                reported = MeasurementLatents()
                response = response + sum_responses(upcoming, reported, state.coef, spec, times)
            noise = rng.standard_normal(len(times)) * np.sqrt(var + state.sigma_y**2)
            trends.append(mean)
            responses.append(response)
            predictive.append(mean + response + noise)

        pid = full.patient_id
        trend = np.mean(trends, axis=0)
        response = np.mean(responses, axis=0)
        out.append(
            PatientTrajectory(
                patient_id=pid,
                times=times,
                outcome=original.outcome,
                train_mask=full.train_mask,
                test_mask=full.test_mask,
                meal_times=full.meal_times,
                trend=standardizer.restore_outcome(pid, trend),
                responses=standardizer.restore_outcome(pid, response, center=False),
                total=standardizer.restore_outcome(pid, trend + response),
                lower=standardizer.restore_outcome(pid, np.quantile(predictive, 0.05, axis=0)),
                upper=standardizer.restore_outcome(pid, np.quantile(predictive, 0.95, axis=0)),
                origin=full.origin,
            )
        )
    return out


def trajectory_frame(trajectories: Sequence[PatientTrajectory], split: str | None = None) -> pd.DataFrame:
    """All trajectories in one table, patient after patient."""
    frames = [trajectory.frame(split) for trajectory in trajectories]
    if not frames:
        return pd.DataFrame(columns=list(TRAJECTORY_COLUMNS))
    return pd.concat(frames, ignore_index=True)


def meal_latents(
    draws: PosteriorDraws, data: Sequence[PatientData], spec: ModelSpec
) -> pd.DataFrame | None:
    """
    Posterior summaries of the per-meal reporting errors.

    ``time_error`` is the estimated reported minus true time (bias plus per-meal offset) and
    ``delta`` the factor between reported and true amounts.

    :param draws: The posterior draws.
    :param data: The patients, training and test points.
    :param spec: The fitted model.
    :return: One row per training meal, or None for variants without reporting errors.
    """
    if not spec.variant.time_error and not spec.variant.covariate_error:
        return None
    layout = draws.layout
    if layout is None:
        raise StructuralError("the draws carry no parameter layout")

    flat = draws.flat()
    rows = []
    for patient in data:
        train_events, _ = patient.split_events()
        pid = patient.patient_id
        n_meals = len(train_events)
        if n_meals == 0:
            continue
        columns: dict[str, np.ndarray] = {}
        if spec.variant.time_error:
            bias = flat[:, layout[f"report_bias[{pid}]"].offset][:, None]
            error = bias + flat[:, layout[f"time_offsets[{pid}]"].index]
            columns["time_error_mean"] = error.mean(axis=0)
            columns["time_error_q05"] = np.quantile(error, 0.05, axis=0)
            columns["time_error_q95"] = np.quantile(error, 0.95, axis=0)
        if spec.variant.covariate_error:
            log_delta = flat[:, layout[f"log_amount_errors[{pid}]"].index]
            columns["log_delta_mean"] = log_delta.mean(axis=0)
            columns["delta_mean"] = np.exp(log_delta).mean(axis=0)
            columns["delta_q05"] = np.exp(np.quantile(log_delta, 0.05, axis=0))
            columns["delta_q95"] = np.exp(np.quantile(log_delta, 0.95, axis=0))
        for m, event in enumerate(train_events):
            row = {"patient_id": pid, "meal": m, "time_min": event.observed_time + patient.origin}
            row.update({name: float(values[m]) for name, values in columns.items()})
            rows.append(row)
    return pd.DataFrame(rows)


def pointwise_loglik_matrix(
    draws: PosteriorDraws, posterior: TrajectoryPosterior, n_samples: int = 1000
) -> np.ndarray:
    """
    Leave-one-out log predictive densities of every training observation at thinned draws.

    :return: A ``(draws, observations)`` matrix for PSIS-LOO.
    """
    _check_names(posterior, draws)
    flat = draws.flat(unconstrained=True)
    indices = thinned_indices(len(flat), n_samples)
    return np.stack([posterior.pointwise_loglik(flat[i]) for i in indices])
