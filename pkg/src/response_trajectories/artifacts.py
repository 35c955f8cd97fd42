"""Reading and writing fit directories and run manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .data import Standardizer
from .inference.nuts import PosteriorDraws, SamplerConfig
from .inference.params import ParamLayout
from .model import ModelSpec
from .utils.exceptions import DatasetMismatch, MalformedInput, MissingFit

DRAWS_FILE = "draws.csv"
FIT_FILE = "fit.json"
SUMMARY_FILE = "summary.json"
TRAJECTORY_FILE = "trajectory.csv"
LATENTS_FILE = "latents.csv"
LOGLIK_FILE = "pointwise_loglik.npz"
MANIFEST_FILE = "manifest.json"
SAMPLER_COLUMNS = (
    "chain",
    "draw",
    "lp__",
    "accept_stat__",
    "stepsize__",
    "treedepth__",
    "n_leapfrog__",
    "divergent__",
)
FLOAT_FORMAT = "%.17g"


def to_jsonable(value: Any) -> Any:
    """Converts numpy scalars and arrays to plain Python; non-finite floats become None."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    return value


def write_json(content: Any, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="\n") as file:
        json.dump(to_jsonable(content), file, indent=2, sort_keys=False)
        file.write("\n")
    return path


def read_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        with open(path) as file:
            return json.load(file)
    except json.JSONDecodeError as err:
        raise MalformedInput(str(path), f"invalid JSON ({err.msg})", row=err.lineno) from None


def write_table(frame: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, lineterminator="\n", float_format=FLOAT_FORMAT)
    return path


def sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as file:
        for chunk in iter(lambda: file.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def draws_frame(draws: PosteriorDraws) -> pd.DataFrame:
    """One row per draw, chain after chain, with sampler columns followed by the parameters."""
    chains, n_draws = draws.n_chains, draws.n_draws
    sampler = pd.DataFrame(
        {
            "chain": np.repeat(np.arange(chains), n_draws),
            "draw": np.tile(np.arange(n_draws), chains),
            "lp__": draws.logp.ravel(),
            "accept_stat__": draws.accept_stats.ravel(),
            "stepsize__": np.repeat(draws.step_sizes, n_draws),
            "treedepth__": draws.tree_depths.ravel().astype(int),
            "n_leapfrog__": draws.n_leapfrog.ravel().astype(int),
            "divergent__": draws.divergences.ravel().astype(int),
        }
    )
    values = pd.DataFrame(draws.flat(), columns=list(draws.names))
    return pd.concat([sampler, values], axis=1)


def write_draws(draws: PosteriorDraws, path: str | Path) -> Path:
    return write_table(draws_frame(draws), path)


def read_draws(path: str | Path, layout: ParamLayout | None = None) -> PosteriorDraws:
    """
    Loads draws written by :func:`write_draws`.

    :param path: The CSV file.
    :param layout: The parameter layout; the log-transformed coordinates are mapped back to the
        unconstrained space with it.
    :return: The draws.
    :raises MalformedInput: If the sampler columns are missing or the chains are ragged.
    """
    frame = pd.read_csv(path)
    if tuple(frame.columns[: len(SAMPLER_COLUMNS)]) != SAMPLER_COLUMNS:
        raise MalformedInput(str(path), f"expected leading columns {','.join(SAMPLER_COLUMNS)}", row=1)
    names = [str(c) for c in frame.columns[len(SAMPLER_COLUMNS) :]]
    chains = int(frame["chain"].max()) + 1 if len(frame) else 0
    if chains == 0 or len(frame) % chains:
        raise MalformedInput(str(path), "chains have different lengths")
    n_draws = len(frame) // chains

    def grid(column: str, dtype=float) -> np.ndarray:
        return frame[column].to_numpy(dtype=dtype).reshape(chains, n_draws)

    values = frame[names].to_numpy(dtype=float).reshape(chains, n_draws, len(names))
    unconstrained = values.copy()
    if layout is not None:
        if layout.names() != names:
            raise MalformedInput(str(path), "parameter columns do not match the fit layout", row=1)
        mask = layout.log_mask()
        with np.errstate(divide="ignore"):
            unconstrained[..., mask] = np.log(values[..., mask])
    return PosteriorDraws(
        draws=values,
        logp=grid("lp__"),
        divergences=grid("divergent__", int).astype(bool),
        tree_depths=grid("treedepth__", int),
        step_sizes=frame.groupby("chain")["stepsize__"].first().to_numpy(dtype=float),
        accept_stats=grid("accept_stat__"),
        n_leapfrog=grid("n_leapfrog__", int),
        names=names,
        layout=layout,
        unconstrained=unconstrained,
    )


@dataclass
class FitArtifacts:
    """
    Everything needed to reuse a fit.

    :ivar directory: The fit directory.
    :ivar draws: The posterior draws.
    :ivar spec: The fitted model.
    :ivar sampler: The sampler settings of the run.
    :ivar standardizer: The scaling applied to the data before fitting.
    :ivar data: The data settings of the fit (files, split, covariates, scaling).
    :ivar patient_ids: The fitted patients, in order.
    :ivar manifest: The run manifest, if present.
    """

    directory: Path
    draws: PosteriorDraws
    spec: ModelSpec
    sampler: SamplerConfig
    standardizer: Standardizer
    data: dict
    patient_ids: list[str]
    manifest: dict = field(default_factory=dict)

    @property
    def covariates(self) -> tuple[str, ...]:
        return tuple(self.data.get("covariates", ()))

    def inputs(self) -> dict[str, str]:
        """Hashes of the data files the fit was produced from."""
        return {name: item["sha256"] for name, item in self.manifest.get("inputs", {}).items()}


def write_fit(
    directory: str | Path,
    draws: PosteriorDraws,
    spec: ModelSpec,
    sampler: SamplerConfig,
    standardizer: Standardizer,
    data: dict,
    patient_ids: Sequence[str],
) -> dict[str, Path]:
    """
    Writes ``draws.csv`` and ``fit.json`` into a fit directory.

    :return: The written paths, keyed by artifact name.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    content = {
        "version": __version__,
        "model": spec.to_dict(),
        "sampler": sampler.to_dict(),
        "layout": draws.layout.to_dict() if draws.layout else None,
        "standardizer": standardizer.to_dict(),
        "data": data,
        "patients": list(patient_ids),
        "step_sizes": draws.step_sizes,
    }
    return {
        "draws": write_draws(draws, directory / DRAWS_FILE),
        "fit": write_json(content, directory / FIT_FILE),
    }


def load_fit(directory: str | Path) -> FitArtifacts:
    """
    Loads a fit directory.

    :raises MissingFit: If the directory lacks the draws or the fit description.
    """
    directory = Path(directory)
    for name in (DRAWS_FILE, FIT_FILE):
        if not (directory / name).exists():
            raise MissingFit(str(directory), name)
    content = read_json(directory / FIT_FILE)
    layout = ParamLayout.from_dict(content["layout"]) if content.get("layout") else None
    manifest_path = directory / MANIFEST_FILE
    return FitArtifacts(
        directory=directory,
        draws=read_draws(directory / DRAWS_FILE, layout),
        spec=ModelSpec.from_dict(content["model"]),
        sampler=SamplerConfig(**content["sampler"]),
        standardizer=Standardizer.from_dict(content["standardizer"]),
        data=dict(content["data"]),
        patient_ids=[str(pid) for pid in content["patients"]],
        manifest=read_json(manifest_path) if manifest_path.exists() else {},
    )


def write_loglik(loglik: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    np.savez_compressed(path, loglik=np.asarray(loglik, dtype=float))
    return path


def read_loglik(path: str | Path) -> np.ndarray | None:
    path = Path(path)
    if not path.exists():
        return None
    with np.load(path) as content:
        return content["loglik"]


def check_same_data(first: FitArtifacts, second: FitArtifacts) -> None:
    """
    Verifies that two fits were produced from the same patients and input files.

    :raises DatasetMismatch: If they were not.
    """
    if first.patient_ids != second.patient_ids:
        raise DatasetMismatch(",".join(first.patient_ids), ",".join(second.patient_ids))
    ours, theirs = first.inputs(), second.inputs()
    if ours and theirs and ours != theirs:
        raise DatasetMismatch(f"{first.directory} inputs", f"{second.directory} inputs")


def write_manifest(
    directory: str | Path,
    command: str,
    config: dict,
    seed: int,
    artifacts: dict[str, Path],
    inputs: dict[str, Path] | None = None,
) -> Path:
    """
    Records a run: the command, its full configuration and seed, and the SHA-256 of every
    artifact and input file.
    """
    directory = Path(directory)
    content = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "artifacts": {
            name: {"path": Path(path).name, "sha256": sha256(path)}
            for name, path in sorted(artifacts.items())
        },
        "inputs": {
            name: {"path": str(path), "sha256": sha256(path)}
            for name, path in sorted((inputs or {}).items())
        },
    }
    return write_json(content, directory / MANIFEST_FILE)
