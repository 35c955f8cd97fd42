"""Fit quality metrics, model comparison and coefficient summaries.

``M1`` is the share of outcome variance explained by the trend and ``M2`` the additional share
explained once the responses are added, both inside meal windows of the training period. ``M3``
and ``M4`` are the training and test mean squared errors (the latter inside test meal windows),
and ``M5`` the absolute difference between the variance of the summed responses and that of the
outcome inside test meal windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Collection, Sequence

import numpy as np
import pandas as pd

from .data import PatientData, Standardizer
from .inference.nuts import PosteriorDraws
from .model import ModelSpec, ResponseCoefficients, area_sensitivity, covariate_labels
from .simulate import GroundTruth
from .stats import LooResult, UTestResult, cosine_similarity, mann_whitney_u
from .trajectory import PatientTrajectory
from .utils.exceptions import DatasetMismatch, DomainError
from .utils.logger import LOGGER

WINDOW_BEFORE = 60.0
WINDOW_AFTER = 180.0
EXCLUSION_THRESHOLD = 0.15
TABLE_COLUMNS = ("M1", "M2", "M3", "M4", "M5", "p-value", "LOO", "pLOO", "SE-LOO")


def meal_window_mask(
    times: np.ndarray,
    meal_times: np.ndarray,
    before: float = WINDOW_BEFORE,
    after: float = WINDOW_AFTER,
) -> np.ndarray:
    """
    Marks the times lying in ``[t − before, t + after]`` of at least one meal ``t``.

    :param times: The observation times.
    :param meal_times: The meal times.
    :return: A boolean mask over ``times``.
    """
    times = np.asarray(times, dtype=float)
    meal_times = np.asarray(meal_times, dtype=float)
    if len(meal_times) == 0:
        return np.zeros(len(times), dtype=bool)
    lag = times[:, None] - meal_times[None, :]
    return np.any((lag >= -before) & (lag <= after), axis=1)


def _train_windows(trajectory: PatientTrajectory) -> np.ndarray:
    return trajectory.train_mask & meal_window_mask(trajectory.times, trajectory.meal_times)


def _test_windows(trajectory: PatientTrajectory) -> np.ndarray:
    return trajectory.test_mask & meal_window_mask(trajectory.times, trajectory.meal_times)


def patient_m1_m2(trajectory: PatientTrajectory) -> tuple[float, float]:
    """M1 and M2 of one patient; NaN where the outcome has no variance inside the windows."""
    mask = _train_windows(trajectory)
    if mask.sum() < 2:
        return np.nan, np.nan
    outcome_var = np.var(trajectory.outcome[mask])
    if outcome_var == 0:
        LOGGER.warning(f"outcome of {trajectory.patient_id} is constant in the meal windows")
        return np.nan, np.nan
    m1 = np.var(trajectory.trend[mask]) / outcome_var
    m2 = np.var(trajectory.total[mask]) / outcome_var - m1
    return float(m1), float(m2)


def metric_m1_m2(trajectories: Sequence[PatientTrajectory]) -> tuple[float, float]:
    """
    Mean over patients of the variance explained by the trend, and of the additional variance
    explained by the responses, inside training meal windows.

    Patients without outcome variance there are left out.
    """
    values = np.array([patient_m1_m2(t) for t in trajectories], dtype=float).reshape(-1, 2)
    if np.all(np.isnan(values)):
        return np.nan, np.nan
    m1, m2 = np.nanmean(values, axis=0)
    return float(m1), float(m2)


def patient_mse(trajectory: PatientTrajectory, which: str) -> float:
    """
    Mean squared error of the posterior-mean trajectory of one patient.

    :param which: ``"train"`` (every training point) or ``"test"`` (test points in meal windows).
    """
    if which == "train":
        mask = trajectory.train_mask
    elif which == "test":
        mask = _test_windows(trajectory)
    else:
        raise DomainError("which", which, "'train' or 'test'")
    if not mask.any():
        return np.nan
    return float(np.mean(np.square(trajectory.total[mask] - trajectory.outcome[mask])))


def metric_mse(
    trajectories: Sequence[PatientTrajectory], which: str, excluded: Collection[str] = ()
) -> float:
    """
    Mean over the included patients of the per-patient mean squared error.

    :param which: ``"train"`` for M3, ``"test"`` for M4.
    :param excluded: Identifiers of patients to leave out.
    :return: The metric; NaN (with a warning) when no patient has points to score.
    """
    values = [patient_mse(t, which) for t in trajectories if t.patient_id not in excluded]
    values = [v for v in values if np.isfinite(v)]
    if not values:
        LOGGER.warning(f"no {which} points to score")
        return np.nan
    return float(np.mean(values))


def patient_m5(trajectory: PatientTrajectory) -> float:
    mask = _test_windows(trajectory)
    if not mask.any():
        return np.nan
    response = trajectory.responses[mask]
    return float(abs(np.var(response) - np.var(trajectory.outcome[mask])))


def metric_m5(trajectories: Sequence[PatientTrajectory]) -> float:
    """Mean over patients of ``|Var(ΣR) − Var(y)|`` inside test meal windows."""
    values = [v for v in (patient_m5(t) for t in trajectories) if np.isfinite(v)]
    if not values:
        LOGGER.warning("no test points in meal windows")
        return np.nan
    return float(np.mean(values))


@dataclass
class MetricReport:
    """
    The metrics of one fitted model.

    :ivar per_patient: One row per patient with ``m1`` to ``m5``.
    :ivar excluded: Patients left out of M3 and M4, with the reason.
    :ivar loo: The leave-one-out estimate, if available.
    :ivar u_test: Test of the per-patient M4 being smaller than a baseline's.
    """

    m1: float
    m2: float
    m3: float
    m4: float
    m5: float
    per_patient: pd.DataFrame
    excluded: dict[str, str] = field(default_factory=dict)
    loo: LooResult | None = None
    u_test: UTestResult | None = None

    def table_row(self) -> dict[str, float]:
        """The metrics under the usual comparison-table headers."""
        nan = float("nan")
        return {
            "M1": self.m1,
            "M2": self.m2,
            "M3": self.m3,
            "M4": self.m4,
            "M5": self.m5,
            "p-value": self.u_test.p_one_sided if self.u_test else nan,
            "LOO": self.loo.elpd_loo if self.loo else nan,
            "pLOO": self.loo.p_loo if self.loo else nan,
            "SE-LOO": self.loo.se_loo if self.loo else nan,
        }

    def to_dict(self) -> dict:
        return {
            "metrics": {"m1": self.m1, "m2": self.m2, "m3": self.m3, "m4": self.m4, "m5": self.m5},
            "table": self.table_row(),
            "per_patient": self.per_patient.to_dict(orient="records"),
            "excluded": dict(self.excluded),
            "loo": self.loo.to_dict() if self.loo else None,
            "u_test": self.u_test.to_dict() if self.u_test else None,
        }


def evaluate_fit(
    trajectories: Sequence[PatientTrajectory],
    loo: LooResult | None = None,
    baseline: MetricReport | None = None,
    threshold: float = EXCLUSION_THRESHOLD,
) -> MetricReport:
    """
    Computes M1 to M5 and, given a baseline, the U-test on per-patient M4.

    Patients whose M2 under the baseline (or under this model when no baseline is given) is
    below ``threshold`` are excluded from M3, M4 and the U-test.

    :param trajectories: The fitted trajectories of every patient.
    :param loo: The leave-one-out estimate of the fit.
    :param baseline: The report of the baseline model on the same patients.
    :param threshold: The exclusion threshold on M2.
    :return: The report.
    :raises DatasetMismatch: If the baseline was evaluated on other patients.
    """
    rows = []
    for t in trajectories:
        m1, m2 = patient_m1_m2(t)
        rows.append(
            {
                "patient_id": t.patient_id,
                "m1": m1,
                "m2": m2,
                "m3": patient_mse(t, "train"),
                "m4": patient_mse(t, "test"),
                "m5": patient_m5(t),
            }
        )
    per_patient = pd.DataFrame(rows, columns=["patient_id", "m1", "m2", "m3", "m4", "m5"])

    reference = per_patient
    if baseline is not None:
        ours = sorted(per_patient["patient_id"])
        theirs = sorted(baseline.per_patient["patient_id"])
        if ours != theirs:
            raise DatasetMismatch(",".join(ours), ",".join(theirs))
        reference = baseline.per_patient

    excluded = {
        str(row.patient_id): f"M2 {row.m2:.3f} below {threshold}"
        for row in reference.itertuples()
        if np.isfinite(row.m2) and row.m2 < threshold
    }
    for pid, reason in excluded.items():
        LOGGER.info(f"{pid} excluded from the error metrics: {reason}")

    m1, m2 = metric_m1_m2(trajectories)
    report = MetricReport(
        m1=m1,
        m2=m2,
        m3=metric_mse(trajectories, "train", excluded),
        m4=metric_mse(trajectories, "test", excluded),
        m5=metric_m5(trajectories),
        per_patient=per_patient,
        excluded=excluded,
        loo=loo,
    )
    if baseline is not None:
        report.u_test = compare_m4(per_patient, baseline.per_patient, excluded)
    return report


def compare_m4(
    candidate: pd.DataFrame, baseline: pd.DataFrame, excluded: Collection[str] = ()
) -> UTestResult | None:
    """U-test of the candidate's per-patient M4 being smaller than the baseline's."""
    ours = candidate.set_index("patient_id")["m4"]
    theirs = baseline.set_index("patient_id")["m4"]
    keep = [
        pid
        for pid in ours.index
        if pid not in excluded and np.isfinite(ours[pid]) and np.isfinite(theirs.get(pid, np.nan))
    ]
    if not keep:
        LOGGER.warning("no patient has a test error under both models")
        return None
    return mann_whitney_u(ours[keep].to_numpy(), theirs[keep].to_numpy())


def cosine_similarity_heights(
    draws: PosteriorDraws, truth: GroundTruth, standardizer: Standardizer | None = None
) -> float:
    """
    Cosine similarity of the concatenated posterior-mean height coefficients and the true ones.

    :param draws: Draws of a model fitted to the simulated patients.
    :param truth: The ground truth of the simulation.
    :param standardizer: The scaling applied before fitting; estimates are mapped back first.
    :return: A value in ``[-1, 1]``; NaN if either vector is zero.
    """
    if draws.layout is None:
        raise DomainError("draws", "without layout", "a fitted model posterior")
    means = draws.mean()
    estimate, reference = [], []
    for patient in truth.patients:
        beta_h = means[draws.layout[f"beta_h[{patient.patient_id}]"].index]
        if standardizer is not None:
            beta_h, _ = standardizer.restore_coefficients(beta_h, np.zeros(len(beta_h)))
        estimate.append(beta_h)
        reference.append(np.asarray(patient.beta_h, dtype=float))
    return cosine_similarity(np.concatenate(estimate), np.concatenate(reference))


def coefficient_summary(
    draws: PosteriorDraws,
    data: Sequence[PatientData],
    spec: ModelSpec,
    standardizer: Standardizer | None = None,
) -> pd.DataFrame:
    """
    Posterior summaries of the response coefficients and area sensitivities per nutrient.

    Coefficients are expressed per unit of the original outcome and covariates. The area
    sensitivity of nutrient ``p`` is the change in response area per unit of ``p``, taken at the
    patient's mean reported meal.

    :return: One row per patient and covariate.
    """
    layout = draws.layout
    if layout is None:
        raise DomainError("draws", "without layout", "a fitted model posterior")
    standardizer = standardizer or Standardizer.identity(data)
    flat = draws.flat()
    rows = []
    for patient in data:
        pid = patient.patient_id
        dim = patient.covariate_dim
        block = layout[f"beta_h[{pid}]"]
        labels = block.labels or covariate_labels(dim)
        beta_h = flat[:, block.index]
        beta_l = flat[:, layout[f"beta_l[{pid}]"].index]
        restored = [standardizer.restore_coefficients(h, l) for h, l in zip(beta_h, beta_l)]
        beta_h_orig = np.array([r[0] for r in restored])
        beta_l_orig = np.array([r[1] for r in restored])

        x_mean = (
            patient.covariate_matrix.mean(axis=0) if patient.n_meals else np.ones(dim)
        ) / standardizer.covariate_scales
        floor = spec.length_scale_floor
        for p, label in enumerate(labels):
            areas = np.array(
                [
                    area_sensitivity(ResponseCoefficients(h, l), x_mean, p, floor)
                    for h, l in zip(beta_h, beta_l)
                ]
            )
            # per unit of the original covariate and outcome
            areas = areas * standardizer.outcome_scale / standardizer.covariate_scales[p]
            rows.append(
                {
                    "patient_id": pid,
                    "covariate": label,
                    "beta_h_mean": float(beta_h_orig[:, p].mean()),
                    "beta_h_sd": float(beta_h_orig[:, p].std()),
                    "beta_l_mean": float(beta_l_orig[:, p].mean()),
                    "beta_l_sd": float(beta_l_orig[:, p].std()),
                    "area_sensitivity_mean": float(areas.mean()),
                    "area_sensitivity_q05": float(np.quantile(areas, 0.05)),
                    "area_sensitivity_q95": float(np.quantile(areas, 0.95)),
                }
            )
    return pd.DataFrame(rows)
