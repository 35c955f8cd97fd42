from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .data import NUTRIENTS, TEST_DAYS, TRAIN_DAYS
from .inference.nuts import SamplerConfig
from .model import ModelSpec
from .simulate import SimConfig
from .utils.exceptions import DomainError, InputFileNotFound, MalformedInput

THREADS_VARIABLE = "RESPONSE_TRAJECTORIES_THREADS"
SECTIONS = ("data", "model", "sampler", "simulation")


@dataclass
class DataConfig:
    """
    Input files, the train/test split and preprocessing.

    :ivar glucose: The glucose table.
    :ivar meals: The meals table.
    :ivar train_days: Days (``floor(t / 1440)``) used for training.
    :ivar test_days: Days used for testing.
    :ivar covariates: The nutrient columns used as covariates.
    :ivar standardize: Scale outcomes and covariates before fitting.
    :ivar unit: Label of the outcome unit; no conversion is done.
    :ivar trajectory_samples: Thinned draws used for trajectories and bands.
    """

    glucose: str | None = None
    meals: str | None = None
    train_days: tuple[int, ...] = TRAIN_DAYS
    test_days: tuple[int, ...] = TEST_DAYS
    covariates: tuple[str, ...] = NUTRIENTS
    standardize: bool = True
    unit: str = "mmol/L"
    trajectory_samples: int = 200

    def __post_init__(self) -> None:
        self.train_days = tuple(int(d) for d in self.train_days)
        self.test_days = tuple(int(d) for d in self.test_days)
        self.covariates = tuple(str(c) for c in self.covariates)
        if set(self.train_days) & set(self.test_days):
            raise DomainError("test_days", list(self.test_days), "disjoint from train_days")
        unknown = [c for c in self.covariates if c not in NUTRIENTS]
        if unknown or not self.covariates:
            raise DomainError("covariates", list(self.covariates), f"a subset of {NUTRIENTS}")
        if self.trajectory_samples < 1:
            raise DomainError("trajectory_samples", self.trajectory_samples, ">= 1")


@dataclass
class RunConfig:
    """The complete configuration of one command line run."""

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    simulation: SimConfig = field(default_factory=SimConfig)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self.data)
        data["train_days"] = list(self.data.train_days)
        data["test_days"] = list(self.data.test_days)
        data["covariates"] = list(self.data.covariates)
        return {
            "data": data,
            "model": self.model.to_dict(),
            "sampler": self.sampler.to_dict(),
            "simulation": self.simulation.to_dict(),
        }


_SECTION_TYPES = {
    "data": DataConfig,
    "model": ModelSpec,
    "sampler": SamplerConfig,
    "simulation": SimConfig,
}


def read_config_file(path: str | Path) -> dict[str, dict[str, Any]]:
    """
    Reads a YAML or JSON configuration file.

    :param path: The file.
    :return: The sections found in the file.
    :raises MalformedInput: If the file does not hold a mapping of known sections.
    """
    path = Path(path)
    if not path.exists():
        raise InputFileNotFound(str(path))
    with open(path) as file:
        try:
            content = yaml.safe_load(file) or {}
        except yaml.YAMLError as err:
            raise MalformedInput(str(path), f"not valid YAML or JSON ({err})") from None
    if not isinstance(content, dict):
        raise MalformedInput(str(path), "expected a mapping of sections")
    unknown = [key for key in content if key not in SECTIONS]
    if unknown:
        raise MalformedInput(str(path), f"unknown sections {unknown}, expected {list(SECTIONS)}")
    for name, section in content.items():
        if not isinstance(section, dict):
            raise MalformedInput(str(path), f"section <{name}> is not a mapping")
    return content


def _threads_from_environment() -> dict[str, int]:
    value = os.environ.get(THREADS_VARIABLE)
    if value is None or value == "":
        return {}
    try:
        return {"threads": int(value)}
    except ValueError:
        raise MalformedInput(THREADS_VARIABLE, f"expected an integer, got {value!r}") from None


def build_config(
    path: str | Path | None = None,
    overrides: dict[str, dict[str, Any]] | None = None,
) -> RunConfig:
    """
    Assembles a run configuration.

    Values come from the defaults, then the configuration file, then the thread count in the
    environment, then ``overrides`` (the command line flags).

    :param path: An optional YAML or JSON file with sections ``data``, ``model``, ``sampler``
        and ``simulation``.
    :param overrides: Values per section taking precedence over the file.
    :return: The configuration.
    :raises MalformedInput: On unknown keys or invalid values.
    """
    source = str(path) if path is not None else "command line"
    merged: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    if path is not None:
        for name, section in read_config_file(path).items():
            merged[name].update(section)
    merged["sampler"].update(_threads_from_environment())
    for name, section in (overrides or {}).items():
        merged[name].update({k: v for k, v in section.items() if v is not None})

    sections = {}
    for name, cls in _SECTION_TYPES.items():
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(merged[name]) - known)
        if unknown:
            raise MalformedInput(source, f"unknown keys {unknown} in section <{name}>")
        try:
            sections[name] = cls(**merged[name])
        except (DomainError, ValueError, TypeError) as err:
            raise MalformedInput(source, f"invalid <{name}> settings: {err}") from None
    return RunConfig(**sections)
