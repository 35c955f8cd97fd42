import numpy as np
import pytest

from response_trajectories.data import (
    GLUCOSE_COLUMNS,
    MEAL_COLUMNS,
    MINUTES_PER_DAY,
    PatientData,
    Standardizer,
    TreatmentEvent,
    ingest,
    write_dataset,
)
from response_trajectories.utils.exceptions import (
    DomainError,
    InputFileNotFound,
    MalformedInput,
    UnknownPatient,
)

from . import MSG_NO_MATCH

GLUCOSE_HEADER = ",".join(GLUCOSE_COLUMNS)
MEALS_HEADER = ",".join(MEAL_COLUMNS)


def _glucose_lines(pid: str, start: float, days: int = 3, cadence: float = 240.0) -> list[str]:
    times = start + np.arange(0.0, days * MINUTES_PER_DAY, cadence)
    return [f"{pid},{t:g},{5.0 + 0.01 * i:g}" for i, t in enumerate(times)]


@pytest.fixture
def files(tmp_path):
    """Two patients over three days; patient b starts later and has one meal."""
    glucose = [GLUCOSE_HEADER, *_glucose_lines("a", 1000.0), *_glucose_lines("b", 2000.0)]
    meals = [
        MEALS_HEADER,
        "a,1060,10,5,1,2,3",
        "a,1060,4,0,0,0,1",
        "a,3900,20,0,0,1,0",
        "b,2100,1,2,3,4,5",
    ]
    glucose_path = tmp_path / "glucose.csv"
    meals_path = tmp_path / "meals.csv"
    glucose_path.write_text("\n".join(glucose) + "\n")
    meals_path.write_text("\n".join(meals) + "\n")
    return glucose_path, meals_path


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def test_ingest(files):
    """Test patient order, relative times, the day split and the meals"""
    patients = ingest(*files)
    assert [p.patient_id for p in patients] == ["a", "b"], MSG_NO_MATCH
    a, b = patients
    assert a.origin == 1000.0
    assert a.obs_times[0] == 0.0
    assert a.n_obs == 18
    day = np.floor(a.obs_times / MINUTES_PER_DAY)
    assert np.array_equal(a.train_mask, day < 2)
    assert np.array_equal(a.test_mask, day == 2)
    assert np.allclose(a.meal_times, [60.0, 60.0, 2900.0]), MSG_NO_MATCH
    assert np.allclose(a.covariate_matrix[0], [10, 5, 1, 2, 3])
    assert b.n_meals == 1
    assert b.meal_times[0] == 100.0


def test_ingest_covariate_subset(files):
    patients = ingest(*files, covariates=("fat", "starch"))
    assert patients[0].covariate_dim == 2
    assert np.allclose(patients[0].covariate_matrix[0], [2.0, 10.0]), MSG_NO_MATCH


def test_ingest_other_split(files):
    patients = ingest(*files, train_days=(0,), test_days=(1, 2))
    a = patients[0]
    assert a.train_mask.sum() == 6
    assert a.test_mask.sum() == 12


@pytest.mark.parametrize("covariates", [(), ("salt",)])
def test_ingest_unknown_covariates(files, covariates):
    with pytest.raises(DomainError):
        ingest(*files, covariates=covariates)


def test_ingest_missing_file(files, tmp_path):
    with pytest.raises(InputFileNotFound):
        ingest(tmp_path / "missing.csv", files[1])


def test_ingest_empty_meals(files, tmp_path):
    """Test that a patient set without meals is accepted"""
    meals = _write(tmp_path / "empty.csv", [MEALS_HEADER])
    patients = ingest(files[0], meals)
    assert all(p.n_meals == 0 for p in patients)
    assert patients[0].covariate_matrix.shape == (0, 5)

    blank = _write(tmp_path / "blank.csv", [""])
    assert all(p.n_meals == 0 for p in ingest(files[0], blank))


@pytest.mark.parametrize(
    "lines, row",
    [
        (["patient,time,glucose", "a,0,5"], 1),
        ([GLUCOSE_HEADER, "a,0,5", "a,15,high"], 3),
        ([GLUCOSE_HEADER, "a,0,5", "a,15,5", "a,15,6"], 4),
        ([GLUCOSE_HEADER, "a,0,5", "a,30,5", "a,15,6"], 4),
        ([GLUCOSE_HEADER, "a,0,5", "b,0,5", "a,0,6"], 4),
    ],
)
def test_malformed_glucose(tmp_path, lines, row):
    """Test that schema violations of the glucose table carry their line number"""
    glucose = _write(tmp_path / "bad.csv", lines)
    with pytest.raises(MalformedInput) as err:
        ingest(glucose, _write(tmp_path / "meals.csv", [MEALS_HEADER]))
    assert err.value.row == row, MSG_NO_MATCH


@pytest.mark.parametrize(
    "lines, row",
    [
        ([MEALS_HEADER, "a,1060,10,5,1,2,3", "a,1100,-1,0,0,0,0"], 3),
        ([MEALS_HEADER, "a,1060,10,5,1,2,x"], 2),
        ([MEALS_HEADER, "a,1060,10,5,1,2,3", "a,1000,1,0,0,0,0"], 3),
    ],
)
def test_malformed_meals(files, tmp_path, lines, row):
    meals = _write(tmp_path / "bad.csv", lines)
    with pytest.raises(MalformedInput) as err:
        ingest(files[0], meals)
    assert err.value.row == row, MSG_NO_MATCH


def test_empty_glucose(files, tmp_path):
    with pytest.raises(MalformedInput):
        ingest(_write(tmp_path / "empty.csv", [""]), files[1])


def test_meal_of_unknown_patient(files, tmp_path):
    meals = _write(tmp_path / "meals.csv", [MEALS_HEADER, "a,1060,1,0,0,0,0", "c,1060,1,0,0,0,0"])
    with pytest.raises(UnknownPatient) as err:
        ingest(files[0], meals)
    assert err.value.row == 3
    assert err.value.exit_code == 3


def test_write_then_ingest(tmp_path, patient, second_patient):
    """Test that written patients are read back with the same times, values and meals"""
    glucose, meals = write_dataset([patient, second_patient], tmp_path / "data")
    patients = ingest(glucose, meals, covariates=("starch", "sugar"), train_days=(0,), test_days=())
    for written, read in zip([patient, second_patient], patients):
        assert read.patient_id == written.patient_id
        assert np.allclose(read.obs_times, written.obs_times)
        assert np.allclose(read.outcome, written.outcome)
        assert np.allclose(read.meal_times, written.meal_times)
        assert np.allclose(read.covariate_matrix, written.covariate_matrix)


@pytest.mark.parametrize(
    "time, covariates",
    [(np.nan, [1.0]), (0.0, [-1.0]), (0.0, [np.inf]), (0.0, [[1.0]])],
)
def test_invalid_event(time, covariates):
    with pytest.raises(DomainError):
        TreatmentEvent(time, covariates)


def test_invalid_patient():
    with pytest.raises(DomainError):
        PatientData(np.zeros(3), np.array([0.0, 2.0, 1.0]))
    with pytest.raises(DomainError):
        PatientData(np.zeros(2), np.arange(3.0))
    with pytest.raises(DomainError):
        PatientData(np.zeros(2), np.arange(2.0), events=[TreatmentEvent(0.0, [1.0])], covariate_dim=2)


def test_training_split(patient):
    """Test that the training view keeps the training points and earlier meals"""
    mask = patient.obs_times < 200.0
    split = PatientData(patient.outcome, patient.obs_times, patient.events, mask, "a")
    assert np.array_equal(split.test_mask, ~mask)
    train_events, test_events = split.split_events()
    assert len(train_events) == 1
    assert len(test_events) == 1
    training = split.training()
    assert training.n_obs == int(mask.sum())
    assert training.n_meals == 1
    assert not training.test_mask.any()


def test_standardizer(patient, second_patient):
    """Test the scaling of outcomes and covariates and its inverse"""
    standardizer = Standardizer.fit([patient, second_patient])
    scaled = standardizer.apply([patient, second_patient])
    pooled = np.concatenate([p.outcome for p in scaled])
    assert abs(scaled[0].outcome.mean()) < 1e-12
    assert pooled.std(ddof=1) == pytest.approx(1.0)
    means = np.concatenate([p.covariate_matrix for p in scaled]).mean(axis=0)
    assert np.allclose(means, 1.0), MSG_NO_MATCH
    assert np.allclose(standardizer.restore_outcome("a", scaled[0].outcome), patient.outcome)

    restored = Standardizer.from_dict(standardizer.to_dict())
    assert restored.outcome_centers == standardizer.outcome_centers
    assert np.array_equal(restored.covariate_scales, standardizer.covariate_scales)


def test_standardizer_ignores_unordered_test_meals():
    """Test that covariate scales come from the training meals when events are out of order"""
    times = np.arange(0.0, 600.0, 20.0)
    events = [TreatmentEvent(500.0, [8.0, 4.0]), TreatmentEvent(100.0, [2.0, 1.0])]
    patient = PatientData(np.sin(times / 50.0), times, events, train_mask=times < 300.0, patient_id="u")
    assert patient.train_event_mask.tolist() == [False, True]
    standardizer = Standardizer.fit([patient])
    assert np.allclose(standardizer.covariate_scales, [2.0, 1.0]), MSG_NO_MATCH
    train, test = patient.split_events()
    assert [e.observed_time for e in train] == [100.0]
    assert [e.observed_time for e in test] == [500.0]


def test_restore_coefficients():
    """Test that restored coefficients give the same response to unscaled covariates"""
    standardizer = Standardizer({"a": 3.0}, 2.0, np.array([10.0, 0.5]))
    beta_h, beta_l = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    restored_h, restored_l = standardizer.restore_coefficients(beta_h, beta_l)
    x = np.array([20.0, 1.5])
    assert restored_h @ x == pytest.approx(2.0 * (beta_h @ (x / standardizer.covariate_scales)))
    assert restored_l @ x == pytest.approx(beta_l @ (x / standardizer.covariate_scales))


def test_identity_standardizer(patient):
    standardizer = Standardizer.identity([patient])
    assert np.array_equal(standardizer.apply([patient])[0].outcome, patient.outcome)
