import numpy as np
import pandas as pd
import pytest

from response_trajectories.data import Standardizer
from response_trajectories.metrics import (
    TABLE_COLUMNS,
    coefficient_summary,
    compare_m4,
    cosine_similarity_heights,
    evaluate_fit,
    meal_window_mask,
    metric_m1_m2,
    metric_m5,
    metric_mse,
    patient_m1_m2,
    patient_mse,
)
from response_trajectories.model import ModelSpec, ResponseCoefficients, area_sensitivity, build_layout
from response_trajectories.trajectory import PatientTrajectory
from response_trajectories.utils.exceptions import DatasetMismatch, DomainError

from . import MSG_NO_MATCH

TIMES = np.arange(0.0, 480.0, 30.0)
TRAIN = TIMES < 240.0
OUTCOME = np.sin(TIMES / 50.0)


def _trajectory(pid="a", trend=None, responses=None, outcome=OUTCOME, meal_times=(60.0, 300.0)):
    """Sixteen points, eight for training; each half has one meal whose window covers it."""
    trend = np.zeros(len(TIMES)) if trend is None else np.asarray(trend, dtype=float)
    responses = np.zeros(len(TIMES)) if responses is None else np.asarray(responses, dtype=float)
    total = trend + responses
    return PatientTrajectory(
        patient_id=pid,
        times=TIMES,
        outcome=outcome,
        train_mask=TRAIN,
        test_mask=~TRAIN,
        meal_times=np.asarray(meal_times, dtype=float),
        trend=trend,
        responses=responses,
        total=total,
        lower=total - 1.0,
        upper=total + 1.0,
    )


def _explained_by_responses(pid: str, test_error: float) -> PatientTrajectory:
    """Responses reproduce the outcome on the training points and miss it by ``test_error`` after."""
    return _trajectory(pid, responses=OUTCOME + test_error * ~TRAIN)


def test_meal_window_bounds():
    """Test that the window is closed at one hour before and three hours after a meal"""
    times = np.array([39.0, 40.0, 100.0, 280.0, 281.0])
    mask = meal_window_mask(times, np.array([100.0]))
    assert mask.tolist() == [False, True, True, True, False], MSG_NO_MATCH
    assert not meal_window_mask(times, np.array([])).any()


def test_trend_explains_everything():
    m1, m2 = patient_m1_m2(_trajectory(trend=OUTCOME))
    assert m1 == pytest.approx(1.0)
    assert m2 == pytest.approx(0.0, abs=1e-12), MSG_NO_MATCH


def test_responses_explain_everything():
    m1, m2 = patient_m1_m2(_trajectory(responses=OUTCOME))
    assert m1 == pytest.approx(0.0)
    assert m2 == pytest.approx(1.0), MSG_NO_MATCH


def test_constant_outcome():
    """Test that a patient without outcome variance gets no M1 and M2 and is left out of the mean"""
    flat = _trajectory("b", outcome=np.ones(len(TIMES)))
    assert all(np.isnan(patient_m1_m2(flat)))
    m1, m2 = metric_m1_m2([_trajectory(trend=OUTCOME), flat])
    assert m1 == pytest.approx(1.0), MSG_NO_MATCH
    assert all(np.isnan(metric_m1_m2([flat])))


def test_no_training_windows():
    m1, _ = patient_m1_m2(_trajectory(meal_times=(400.0,)))
    assert np.isnan(m1)


def test_mean_squared_errors():
    """Test the training error on all training points and the test error in test windows only"""
    trajectory = _trajectory(trend=OUTCOME + np.where(TRAIN, 1.0, 2.0))
    assert patient_mse(trajectory, "train") == pytest.approx(1.0), MSG_NO_MATCH
    assert patient_mse(trajectory, "test") == pytest.approx(4.0), MSG_NO_MATCH

    outside = _trajectory(trend=OUTCOME + 2.0, meal_times=(30.0,))
    assert np.isnan(patient_mse(outside, "test"))
    assert np.isnan(metric_mse([outside], "test"))
    with pytest.raises(DomainError):
        patient_mse(trajectory, "all")


def test_metric_mse_exclusion():
    trajectories = [_explained_by_responses("a", 1.0), _explained_by_responses("b", 3.0)]
    assert metric_mse(trajectories, "test") == pytest.approx(5.0)
    assert metric_mse(trajectories, "test", excluded={"b"}) == pytest.approx(1.0), MSG_NO_MATCH


def test_response_variance_gap():
    """Test M5 as the difference of response and outcome variances in test windows"""
    responses = 2.0 * OUTCOME
    trajectory = _trajectory(responses=responses)
    expected = abs(np.var(responses[~TRAIN]) - np.var(OUTCOME[~TRAIN]))
    assert metric_m5([trajectory]) == pytest.approx(expected), MSG_NO_MATCH
    assert np.isnan(metric_m5([_trajectory(meal_times=(30.0,))]))


def test_evaluate_excludes_low_response_share():
    """Test that patients whose responses explain little are left out of M3 and M4"""
    trajectories = [
        _explained_by_responses("a", 1.0),
        _trajectory("b", trend=OUTCOME + 3.0 * ~TRAIN),
    ]
    report = evaluate_fit(trajectories)
    assert list(report.excluded) == ["b"], MSG_NO_MATCH
    assert report.m4 == pytest.approx(1.0)
    assert report.m1 == pytest.approx(0.5)
    assert report.m2 == pytest.approx(0.5)
    assert report.u_test is None
    assert list(report.per_patient.columns) == ["patient_id", "m1", "m2", "m3", "m4", "m5"]


def test_evaluate_against_baseline():
    """Test the U-test of smaller test errors than a baseline"""
    candidate = evaluate_fit([_explained_by_responses(pid, e) for pid, e in zip("abc", (0.1, 0.2, 0.3))])
    baseline = evaluate_fit([_explained_by_responses(pid, e) for pid, e in zip("abc", (1.0, 2.0, 3.0))])
    report = evaluate_fit([_explained_by_responses(pid, e) for pid, e in zip("abc", (0.1, 0.2, 0.3))], baseline=baseline)
    assert report.u_test is not None
    assert report.u_test.u == 0.0
    assert report.u_test.p_one_sided == pytest.approx(0.05), MSG_NO_MATCH
    assert candidate.u_test is None

    row = report.table_row()
    assert tuple(row) == TABLE_COLUMNS
    assert row["p-value"] == pytest.approx(0.05)
    assert np.isnan(row["LOO"])
    assert report.to_dict()["u_test"]["exact"]


def test_baseline_from_other_patients():
    baseline = evaluate_fit([_explained_by_responses("z", 1.0)])
    with pytest.raises(DatasetMismatch):
        evaluate_fit([_explained_by_responses("a", 1.0)], baseline=baseline)


def test_compare_without_common_errors():
    ours = pd.DataFrame({"patient_id": ["a"], "m4": [np.nan]})
    theirs = pd.DataFrame({"patient_id": ["a"], "m4": [1.0]})
    assert compare_m4(ours, theirs) is None


def _draws_at_truth(toy, make_draws, make_point, scale: float = 1.0, standardizer=None):
    data, truth = toy
    layout = build_layout(data, ModelSpec())
    theta = make_point(layout)
    for item in truth.patients:
        beta_h = item.beta_h * scale
        if standardizer is not None:
            beta_h = beta_h * standardizer.covariate_scales / standardizer.outcome_scale
        theta[layout[f"beta_h[{item.patient_id}]"].index] = beta_h
    return make_draws(layout, theta)


@pytest.mark.parametrize("scale, expected", [(1.0, 1.0), (3.0, 1.0), (-1.0, -1.0)])
def test_cosine_of_heights(toy, make_draws, make_point, scale, expected):
    draws = _draws_at_truth(toy, make_draws, make_point, scale)
    assert cosine_similarity_heights(draws, toy[1]) == pytest.approx(expected), MSG_NO_MATCH


def test_cosine_of_standardized_heights(toy, make_draws, make_point):
    standardizer = Standardizer({"p00": 1.0, "p01": 2.0}, 4.0, np.array([2.0, 0.5]))
    draws = _draws_at_truth(toy, make_draws, make_point, standardizer=standardizer)
    assert cosine_similarity_heights(draws, toy[1], standardizer) == pytest.approx(1.0)
    assert cosine_similarity_heights(draws, toy[1]) < 1.0 - 1e-6


def test_coefficient_summary(patient, second_patient, make_draws, make_point):
    """Test the coefficient rows of constant draws"""
    spec = ModelSpec(variant="ind")
    layout = build_layout([patient, second_patient], spec)
    draws = make_draws(layout, make_point(layout, beta_h=0.5, beta_l=0.1))
    table = coefficient_summary(draws, [patient, second_patient], spec)
    assert len(table) == 4
    assert table["covariate"].tolist() == ["starch", "sugar", "starch", "sugar"], MSG_NO_MATCH
    assert np.allclose(table["beta_h_mean"], 0.5)
    assert np.allclose(table["beta_h_sd"], 0.0)

    coef = ResponseCoefficients(np.full(2, 0.5), np.full(2, 0.1))
    expected = area_sensitivity(coef, patient.covariate_matrix.mean(axis=0), 1, spec.length_scale_floor)
    first = table.iloc[1]
    assert first["area_sensitivity_mean"] == pytest.approx(expected), MSG_NO_MATCH
    assert first["area_sensitivity_q05"] == pytest.approx(first["area_sensitivity_q95"])
