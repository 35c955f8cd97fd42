"""Patient records, CSV ingestion and outcome/covariate standardization."""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import charset_normalizer as charset
import numpy as np
import pandas as pd

from .utils.exceptions import DomainError, InputFileNotFound, MalformedInput, UnknownPatient
from .utils.logger import LOGGER

NUTRIENTS = ("starch", "sugar", "fiber", "fat", "protein")
GLUCOSE_COLUMNS = ("patient_id", "time_min", "glucose")
MEAL_COLUMNS = ("patient_id", "time_min", *NUTRIENTS)
MINUTES_PER_DAY = 1440.0
TRAIN_DAYS = (0, 1)
TEST_DAYS = (2,)


@dataclass(frozen=True)
class TreatmentEvent:
    """A reported meal: its time and its nutrient amounts."""

    observed_time: float
    covariates: np.ndarray

    def __post_init__(self) -> None:
        covariates = np.asarray(self.covariates, dtype=float)
        object.__setattr__(self, "covariates", covariates)
        if covariates.ndim != 1:
            raise DomainError("covariates", covariates.shape, "a vector")
        if not np.all(np.isfinite(covariates)) or np.any(covariates < 0):
            raise DomainError("covariates", covariates.tolist(), "finite and >= 0")
        if not np.isfinite(self.observed_time):
            raise DomainError("observed_time", self.observed_time, "finite")


@dataclass
class PatientData:
    """
    One individual's outcome series and reported treatments.

    :ivar outcome: The outcome values.
    :ivar obs_times: Observation times in minutes, strictly increasing.
    :ivar events: The reported treatments, in any order.
    :ivar train_mask: True for observations used for fitting.
    :ivar patient_id: The identifier used in the input files.
    :ivar test_mask: True for held-out observations; defaults to the complement of ``train_mask``.
    :ivar covariate_dim: The number of covariates of each event.
    :ivar origin: The absolute time of the first observation in the input files.
    """

    outcome: np.ndarray
    obs_times: np.ndarray
    events: list[TreatmentEvent] = field(default_factory=list)
    train_mask: np.ndarray | None = None
    patient_id: str = "p0"
    test_mask: np.ndarray | None = None
    covariate_dim: int | None = None
    origin: float = 0.0

    def __post_init__(self) -> None:
        self.outcome = np.asarray(self.outcome, dtype=float)
        self.obs_times = np.asarray(self.obs_times, dtype=float)
        n_obs = len(self.obs_times)
        if self.train_mask is None:
            self.train_mask = np.ones(n_obs, dtype=bool)
        self.train_mask = np.asarray(self.train_mask, dtype=bool)
        if self.test_mask is None:
            self.test_mask = ~self.train_mask
        self.test_mask = np.asarray(self.test_mask, dtype=bool)

        if not (len(self.outcome) == n_obs == len(self.train_mask) == len(self.test_mask)):
            raise DomainError(
                f"patient {self.patient_id}",
                (len(self.outcome), n_obs, len(self.train_mask)),
                "equal lengths of outcome, obs_times and train_mask",
            )
        if np.any(np.diff(self.obs_times) <= 0):
            raise DomainError(f"obs_times of {self.patient_id}", "...", "strictly increasing")

        dims = {len(event.covariates) for event in self.events}
        if self.covariate_dim is not None:
            dims.add(self.covariate_dim)
        if len(dims) > 1:
            raise DomainError(f"covariates of {self.patient_id}", sorted(dims), "one dimension")
        self.covariate_dim = dims.pop() if dims else len(NUTRIENTS)

    @property
    def n_obs(self) -> int:
        return len(self.obs_times)

    @property
    def n_meals(self) -> int:
        return len(self.events)

    @property
    def meal_times(self) -> np.ndarray:
        return np.array([event.observed_time for event in self.events], dtype=float)

    @property
    def covariate_matrix(self) -> np.ndarray:
        """The ``(M, P)`` matrix of reported covariates."""
        if not self.events:
            return np.zeros((0, self.covariate_dim))
        return np.stack([event.covariates for event in self.events])

    @property
    def last_train_time(self) -> float:
        if not self.train_mask.any():
            raise DomainError(f"train_mask of {self.patient_id}", 0, "at least one training point")
        return float(self.obs_times[self.train_mask][-1])

    @property
    def train_event_mask(self) -> np.ndarray:
        """Whether each event is reported up to the last training point, in event order."""
        return self.meal_times <= self.last_train_time

    def split_events(self) -> tuple[list[TreatmentEvent], list[TreatmentEvent]]:
        """Splits the events into those reported up to the last training point and the rest."""
        mask = self.train_event_mask
        train = [event for event, keep in zip(self.events, mask) if keep]
        test = [event for event, keep in zip(self.events, mask) if not keep]
        return train, test

    def training(self) -> PatientData:
        """The patient restricted to training points and the treatments reported before them."""
        train_events, _ = self.split_events()
        mask = self.train_mask
        return replace(
            self,
            outcome=self.outcome[mask],
            obs_times=self.obs_times[mask],
            events=train_events,
            train_mask=np.ones(int(mask.sum()), dtype=bool),
            test_mask=np.zeros(int(mask.sum()), dtype=bool),
        )


def _read_table(path: str | Path, columns: Sequence[str], allow_empty: bool = False) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise InputFileNotFound(str(path))

    # Decode with the best guess encoding from charset_normalizer
    best = charset.from_path(path).best()
    content = str(best) if best is not None else ""

    if not content.strip():
        if allow_empty:
            return pd.DataFrame({column: [] for column in columns})
        raise MalformedInput(str(path), "file is empty")

    frame = pd.read_csv(io.StringIO(content), dtype={"patient_id": str})
    if tuple(frame.columns) != tuple(columns):
        raise MalformedInput(str(path), f"expected header {','.join(columns)}", row=1)

    for column in columns[1:]:
        values = pd.to_numeric(frame[column], errors="coerce")
        bad = np.flatnonzero(~np.isfinite(values.to_numpy(dtype=float)))
        if len(bad):
            raise MalformedInput(str(path), f"invalid value in column {column}", row=int(bad[0]) + 2)
        frame[column] = values.astype(float)
    return frame


def _check_order(times: np.ndarray, rows: np.ndarray, file: str, strict: bool) -> None:
    steps = np.diff(times)
    bad = np.flatnonzero(steps <= 0) if strict else np.flatnonzero(steps < 0)
    if len(bad):
        i = int(bad[0]) + 1
        reason = "duplicated timestamp" if steps[i - 1] == 0 else "time is not increasing"
        raise MalformedInput(file, reason, row=int(rows[i]) + 2)


def ingest(
    glucose_path: str | Path,
    meals_path: str | Path,
    train_days: Sequence[int] = TRAIN_DAYS,
    test_days: Sequence[int] = TEST_DAYS,
    covariates: Sequence[str] = NUTRIENTS,
) -> list[PatientData]:
    """
    Loads patients from a glucose table and a meals table.

    Times are converted to minutes from each patient's first glucose record. Observations on
    ``day = floor(t / 1440)`` in ``train_days`` are training points, those in ``test_days`` are
    test points. Patients appear in order of their first glucose record.

    :param glucose_path: CSV with header ``patient_id,time_min,glucose``.
    :param meals_path: CSV with header ``patient_id,time_min,starch,sugar,fiber,fat,protein``.
    :param train_days: Days used for training.
    :param test_days: Days used for testing.
    :param covariates: The nutrient columns used as covariates, in order.
    :return: The patients.
    """
    unknown = [name for name in covariates if name not in NUTRIENTS]
    if unknown or not covariates:
        raise DomainError("covariates", list(covariates), f"a non-empty subset of {NUTRIENTS}")

    glucose = _read_table(glucose_path, GLUCOSE_COLUMNS)
    meals = _read_table(meals_path, MEAL_COLUMNS, allow_empty=True)

    negative = np.flatnonzero((meals[list(NUTRIENTS)].to_numpy(dtype=float) < 0).any(axis=1))
    if len(negative):
        raise MalformedInput(str(meals_path), "negative nutrient amount", row=int(negative[0]) + 2)

    patient_ids = list(pd.unique(glucose["patient_id"]))
    known = set(patient_ids)
    for row, pid in enumerate(meals["patient_id"]):
        if pid not in known:
            raise UnknownPatient(str(pid), str(meals_path), row + 2)

    patients = []
    for pid in patient_ids:
        rows = glucose.index[glucose["patient_id"] == pid].to_numpy()
        times = glucose.loc[rows, "time_min"].to_numpy(dtype=float)
        _check_order(times, rows, str(glucose_path), strict=True)
        origin = float(times[0])
        obs_times = times - origin

        meal_rows = meals.index[meals["patient_id"] == pid].to_numpy()
        meal_times = meals.loc[meal_rows, "time_min"].to_numpy(dtype=float)
        _check_order(meal_times, meal_rows, str(meals_path), strict=False)
        amounts = meals.loc[meal_rows, list(covariates)].to_numpy(dtype=float)
        events = [
            TreatmentEvent(observed_time=float(t - origin), covariates=x)
            for t, x in zip(meal_times, amounts)
        ]

        day = np.floor(obs_times / MINUTES_PER_DAY)
        patients.append(
            PatientData(
                outcome=glucose.loc[rows, "glucose"].to_numpy(dtype=float),
                obs_times=obs_times,
                events=events,
                train_mask=np.isin(day, train_days),
                patient_id=str(pid),
                test_mask=np.isin(day, test_days),
                covariate_dim=len(covariates),
                origin=origin,
            )
        )

    LOGGER.configure("ingest")
    LOGGER.info(
        f"Loaded {len(patients)} patients, {len(glucose)} glucose records, {len(meals)} meals"
    )
    return patients


def write_dataset(
    patients: Sequence[PatientData],
    directory: str | Path,
    covariates: Sequence[str] | None = None,
) -> tuple[Path, Path]:
    """
    Writes patients to ``glucose.csv`` and ``meals.csv`` in the ingestion schema.

    Nutrient columns not listed in ``covariates`` are written as zeros.

    :param patients: The patients to write.
    :param directory: The output directory, created if needed.
    :param covariates: The nutrient names of the covariate columns. Defaults to the first
        ``covariate_dim`` nutrients.
    :return: The paths of the glucose and meals files.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    glucose_rows, meal_rows = [], []
    for patient in patients:
        names = list(covariates) if covariates else list(NUTRIENTS[: patient.covariate_dim])
        for t, y in zip(patient.obs_times, patient.outcome):
            glucose_rows.append((patient.patient_id, t + patient.origin, y))
        for event in patient.events:
            amounts = dict.fromkeys(NUTRIENTS, 0.0)
            amounts.update(zip(names, event.covariates.tolist()))
            meal_rows.append(
                (patient.patient_id, event.observed_time + patient.origin, *amounts.values())
            )

    glucose_path = directory / "glucose.csv"
    meals_path = directory / "meals.csv"
    pd.DataFrame(glucose_rows, columns=list(GLUCOSE_COLUMNS)).to_csv(
        glucose_path, index=False, lineterminator="\n"
    )
    pd.DataFrame(meal_rows, columns=list(MEAL_COLUMNS)).to_csv(
        meals_path, index=False, lineterminator="\n"
    )
    return glucose_path, meals_path


@dataclass
class Standardizer:
    """
    Outcome and covariate scaling fitted on training data.

    Outcomes are centred per patient and divided by the pooled training standard deviation;
    covariates are divided by their pooled training means.
    """

    outcome_centers: dict[str, float]
    outcome_scale: float
    covariate_scales: np.ndarray

    @classmethod
    def identity(cls, patients: Sequence[PatientData]) -> Standardizer:
        dim = patients[0].covariate_dim if patients else len(NUTRIENTS)
        return cls({p.patient_id: 0.0 for p in patients}, 1.0, np.ones(dim))

    @classmethod
    def fit(cls, patients: Sequence[PatientData]) -> Standardizer:
        centers = {}
        centered = []
        for patient in patients:
            y = patient.outcome[patient.train_mask]
            centers[patient.patient_id] = float(y.mean()) if len(y) else 0.0
            centered.append(y - centers[patient.patient_id])
        pooled = np.concatenate(centered) if centered else np.zeros(0)
        scale = float(pooled.std(ddof=1)) if len(pooled) > 1 else 1.0
        if not scale > 0:
            scale = 1.0

        dim = patients[0].covariate_dim if patients else len(NUTRIENTS)
        train_meals = [p.covariate_matrix[p.train_event_mask] for p in patients]
        stacked = np.concatenate(train_meals) if train_meals else np.zeros((0, dim))
        means = stacked.mean(axis=0) if len(stacked) else np.ones(dim)
        covariate_scales = np.where(means > 0, means, 1.0)
        return cls(centers, scale, covariate_scales)

    def apply(self, patients: Sequence[PatientData]) -> list[PatientData]:
        """Returns standardized copies of the patients."""
        out = []
        for patient in patients:
            center = self.outcome_centers.get(patient.patient_id, 0.0)
            events = [
                TreatmentEvent(event.observed_time, event.covariates / self.covariate_scales)
                for event in patient.events
            ]
            out.append(
                replace(
                    patient,
                    outcome=(patient.outcome - center) / self.outcome_scale,
                    events=events,
                )
            )
        return out

    def restore_outcome(self, patient_id: str, values: np.ndarray, center: bool = True) -> np.ndarray:
        """Maps standardized outcome values (or, with ``center=False``, differences) back."""
        offset = self.outcome_centers.get(patient_id, 0.0) if center else 0.0
        return np.asarray(values) * self.outcome_scale + offset

    def restore_coefficients(
        self, beta_h: np.ndarray, beta_l: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Expresses coefficients per unit of the original outcome and covariates."""
        return (
            np.asarray(beta_h) * self.outcome_scale / self.covariate_scales,
            np.asarray(beta_l) / self.covariate_scales,
        )

    def to_dict(self) -> dict:
        return {
            "outcome_centers": dict(self.outcome_centers),
            "outcome_scale": self.outcome_scale,
            "covariate_scales": self.covariate_scales.tolist(),
        }

    @classmethod
    def from_dict(cls, content: dict) -> Standardizer:
        return cls(
            {str(k): float(v) for k, v in content["outcome_centers"].items()},
            float(content["outcome_scale"]),
            np.asarray(content["covariate_scales"], dtype=float),
        )
