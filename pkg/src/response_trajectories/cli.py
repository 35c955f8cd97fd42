"""Command line interface: ``fit``, ``predict``, ``simulate``, ``evaluate`` and ``report``.

Exit codes are 0 on success, 2 when the fit has convergence problems (artifacts are still
written), 3 on input errors and 4 on numerical failures.
"""

from __future__ import annotations

import argparse
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .artifacts import (
    LATENTS_FILE,
    LOGLIK_FILE,
    SUMMARY_FILE,
    TRAJECTORY_FILE,
    FitArtifacts,
    check_same_data,
    load_fit,
    read_json,
    read_loglik,
    write_fit,
    write_json,
    write_loglik,
    write_manifest,
    write_table,
)
from .config import DataConfig, RunConfig, build_config, read_config_file
from .data import PatientData, Standardizer, ingest
from .inference.diagnostics import RHAT_WARNING, convergence_problems, summarize
from .inference.nuts import PosteriorDraws, nuts_sample
from .inference.params import ParamVector
from .metrics import TABLE_COLUMNS, MetricReport, coefficient_summary, evaluate_fit
from .model import ModelVariant, TrajectoryPosterior
from .simulate import (
    SimProtocol,
    TrendKind,
    restore_scale,
    simulate_from_fit,
    simulate_generative,
    simulate_toy,
    write_simulation,
)
from .stats import psis_loo
from .trajectory import (
    meal_latents,
    pointwise_loglik_matrix,
    posterior_trajectories,
    trajectory_frame,
)
from .utils.exceptions import DatasetMismatch, MalformedInput, ResponseTrajectoryError
from .utils.logger import LOGGER

EXIT_OK = 0
EXIT_CONVERGENCE = 2
EVALUATION_DIR = "evaluation"
EVALUATION_FILE = "evaluation.json"
PARETO_FILE = "pareto_k.csv"
PREDICTION_FILE = "prediction.csv"
MIN_LOO_DRAWS = 100


class ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors as input errors instead of exiting."""

    def error(self, message: str):  # type: ignore[override]
        raise MalformedInput("command line", message)


def _names(value: str) -> tuple[str, ...]:
    return tuple(item.strip() for item in value.split(",") if item.strip())


def _days(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(item) for item in _names(value))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated days, got {value!r}") from None


def _overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    """Collects the flags named ``<section>__<key>`` into sections."""
    sections: dict[str, dict[str, Any]] = {}
    for dest, value in vars(args).items():
        if "__" not in dest or value is None:
            continue
        section, key = dest.split("__", 1)
        sections.setdefault(section, {})[key] = value
    return sections


def _require_inputs(data: DataConfig) -> tuple[Path, Path]:
    if not data.glucose or not data.meals:
        raise MalformedInput("command line", "the glucose and meals files are required")
    return Path(data.glucose), Path(data.meals)


def _load_patients(data: DataConfig) -> list[PatientData]:
    glucose, meals = _require_inputs(data)
    return ingest(glucose, meals, data.train_days, data.test_days, data.covariates)


def _data_for_fit(fit: FitArtifacts, args: argparse.Namespace) -> DataConfig:
    """The data settings of a fit, overridden by the configuration file and the flags."""
    merged = dict(fit.data)
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config).get("data", {}))
    merged.update(_overrides(args).get("data", {}))
    try:
        return DataConfig(**merged)
    except (ValueError, TypeError) as err:
        raise MalformedInput("command line", f"invalid <data> settings: {err}") from None


def _check_patients(fit: FitArtifacts, patients: Sequence[PatientData]) -> None:
    ids = [p.patient_id for p in patients]
    if ids != fit.patient_ids:
        raise DatasetMismatch(",".join(fit.patient_ids), ",".join(ids))


def _trajectories(fit: FitArtifacts, patients: Sequence[PatientData], data: DataConfig):
    return posterior_trajectories(
        fit.draws,
        patients,
        fit.spec,
        fit.standardizer,
        n_samples=data.trajectory_samples,
        seed=fit.sampler.seed,
        labels=fit.covariates,
    )


def _summary(draws: PosteriorDraws, variant: ModelVariant) -> tuple[dict, list[str]]:
    table = summarize(draws)
    problems = convergence_problems(table)
    content = {
        "variant": variant.value,
        "parameters": table.reset_index().to_dict(orient="records"),
        "sampler": {
            "step_sizes": draws.step_sizes,
            "divergences": int(draws.divergences.sum()),
            "mean_accept_stat": float(draws.accept_stats.mean()),
            "mean_tree_depth": float(draws.tree_depths.mean()),
        },
        "rhat_threshold": RHAT_WARNING,
        "convergence_problems": problems,
    }
    return content, problems


def fit(config: RunConfig, output: str | Path) -> int:
    """
    Fits a model variant to the training days and writes every fit artifact.

    :param config: The run configuration.
    :param output: The fit directory.
    :return: The exit code; 2 if some parameter did not converge.
    """
    output = Path(output)
    data = config.data
    spec = config.model
    glucose, meals = _require_inputs(data)
    patients = _load_patients(data)
    if data.standardize:
        standardizer = Standardizer.fit(patients)
    else:
        standardizer = Standardizer.identity(patients)
    training = [patient.training() for patient in standardizer.apply(patients)]
    posterior = TrajectoryPosterior(training, spec, data.covariates)

    LOGGER.configure("fit")
    LOGGER.info(f"{spec.variant.value} model with {posterior.dim} parameters, {len(training)} patients")
    init = ParamVector(posterior.initial_point(), posterior.layout)
    draws = nuts_sample(posterior, config.sampler, init)

    data_settings = config.to_dict()["data"]
    ids = [p.patient_id for p in patients]
    artifacts = write_fit(output, draws, spec, config.sampler, standardizer, data_settings, ids)
    summary, problems = _summary(draws, spec.variant)
    artifacts["summary"] = write_json(summary, output / SUMMARY_FILE)

    trajectories = posterior_trajectories(
        draws,
        patients,
        spec,
        standardizer,
        n_samples=data.trajectory_samples,
        seed=config.sampler.seed,
        labels=data.covariates,
    )
    artifacts["trajectory"] = write_table(trajectory_frame(trajectories), output / TRAJECTORY_FILE)
    latents = meal_latents(draws, patients, spec)
    if latents is not None:
        artifacts["latents"] = write_table(latents, output / LATENTS_FILE)
    loglik = pointwise_loglik_matrix(draws, posterior)
    artifacts["loglik"] = write_loglik(loglik, output / LOGLIK_FILE)

    write_manifest(
        output,
        "fit",
        config.to_dict(),
        config.sampler.seed,
        artifacts,
        {"glucose": glucose, "meals": meals},
    )
    LOGGER.configure("fit")
    if problems:
        LOGGER.warning(f"R-hat above {RHAT_WARNING} for {len(problems)} parameters: {problems}")
        return EXIT_CONVERGENCE
    LOGGER.info(f"Fit written to {output}")
    return EXIT_OK


def predict(fit_dir: str | Path, data: DataConfig, output: str | Path) -> int:
    """
    Predicts the test days from a fit: trend extrapolation plus responses to the test meals.

    Writes ``prediction.csv`` with the test points only (an empty table when there are none).
    """
    output = Path(output)
    output.mkdir(parents=True, exist_ok=True)
    fitted = load_fit(fit_dir)
    patients = _load_patients(data)
    _check_patients(fitted, patients)
    trajectories = _trajectories(fitted, patients, data)
    frame = trajectory_frame(trajectories, split="test")
    artifacts = {"prediction": write_table(frame, output / PREDICTION_FILE)}
    glucose, meals = _require_inputs(data)
    write_manifest(
        output,
        "predict",
        {"fit": str(fit_dir), "data": asdict(data)},
        fitted.sampler.seed,
        artifacts,
        {"glucose": glucose, "meals": meals},
    )
    LOGGER.configure("predict")
    LOGGER.info(f"{len(frame)} test points predicted")
    return EXIT_OK


def _loo(fitted: FitArtifacts):
    loglik = read_loglik(fitted.directory / LOGLIK_FILE)
    if loglik is None or len(loglik) < MIN_LOO_DRAWS:
        LOGGER.warning(f"LOO needs at least {MIN_LOO_DRAWS} draws; skipped for {fitted.directory}")
        return None
    return psis_loo(loglik)


def _evaluate_one(
    fitted: FitArtifacts, data: DataConfig, baseline: MetricReport | None = None
) -> MetricReport:
    patients = _load_patients(data)
    _check_patients(fitted, patients)
    return evaluate_fit(_trajectories(fitted, patients, data), _loo(fitted), baseline)


def evaluate(
    fit_dir: str | Path,
    data: DataConfig,
    baseline_dir: str | Path | None = None,
    output: str | Path | None = None,
    baseline_data: DataConfig | None = None,
) -> int:
    """
    Computes the metrics of a fit and, given a baseline fit, the U-test against it.

    Writes ``evaluation.json`` and ``pareto_k.csv`` to ``output`` (default: ``evaluation/`` in
    the fit directory).
    """
    fitted = load_fit(fit_dir)
    LOGGER.configure("evaluate")
    baseline = None
    if baseline_dir is not None:
        reference = load_fit(baseline_dir)
        check_same_data(fitted, reference)
        baseline = _evaluate_one(reference, baseline_data or data)
    result = _evaluate_one(fitted, data, baseline)

    output = Path(output) if output is not None else fitted.directory / EVALUATION_DIR
    output.mkdir(parents=True, exist_ok=True)
    baseline_name = str(baseline_dir) if baseline_dir else None
    content = result.to_dict() | {"variant": fitted.spec.variant.value, "baseline": baseline_name}
    artifacts = {"evaluation": write_json(content, output / EVALUATION_FILE)}
    if result.loo is not None:
        k = result.loo.pareto_k
        pareto = pd.DataFrame({"observation": np.arange(len(k)), "pareto_k": k})
        artifacts["pareto_k"] = write_table(pareto, output / PARETO_FILE)
    write_manifest(
        output,
        "evaluate",
        {"fit": str(fit_dir), "baseline": baseline_name},
        fitted.sampler.seed,
        artifacts,
    )
    LOGGER.configure("evaluate")
    row = ", ".join(f"{key} {value:.4g}" for key, value in result.table_row().items())
    LOGGER.info(row)
    return EXIT_OK


def simulate(config: RunConfig, output: str | Path, from_fit: str | Path | None = None) -> int:
    """
    Writes a simulated dataset and its ground truth.

    The ``from_fit`` protocol replays the fit in ``from_fit`` on the patients it was fitted to.
    """
    output = Path(output)
    cfg = config.simulation
    covariates = None
    if cfg.protocol is SimProtocol.TOY:
        data, truth = simulate_toy(cfg, config.model)
    elif cfg.protocol is SimProtocol.FROM_FIT:
        if from_fit is None:
            raise MalformedInput("command line", "the from_fit protocol needs --from-fit")
        fitted = load_fit(from_fit)
        data_settings = DataConfig(**fitted.data)
        template = fitted.standardizer.apply(_load_patients(data_settings))
        data, truth = simulate_from_fit(fitted.draws, template, cfg, fitted.spec)
        data, truth = restore_scale(data, truth, fitted.standardizer)
        covariates = fitted.covariates
    else:
        data, truth = simulate_generative(config.model, None, cfg)

    paths = write_simulation(data, truth, output, covariates)
    write_manifest(output, "simulate", config.to_dict(), cfg.seed, paths)
    LOGGER.configure("simulate")
    LOGGER.info(f"Simulation written to {output}")
    return EXIT_OK


def report(fit_dirs: Sequence[str | Path], output: str | Path, args: argparse.Namespace | None = None) -> int:
    """
    Combines fits into ``report.csv`` (one comparison row per fit) and ``report.json``.

    ``report.json`` holds, per fit, coefficient summaries on the original scale, area
    sensitivities, latent reporting corrections and the evaluation when one exists.
    """
    output = Path(output)
    output.mkdir(parents=True, exist_ok=True)
    rows, fits = [], []
    for fit_dir in fit_dirs:
        fitted = load_fit(fit_dir)
        data = _data_for_fit(fitted, args) if args is not None else DataConfig(**fitted.data)
        evaluation_path = fitted.directory / EVALUATION_DIR / EVALUATION_FILE
        evaluation = read_json(evaluation_path) if evaluation_path.exists() else None
        table = dict.fromkeys(TABLE_COLUMNS, float("nan"))
        if evaluation is not None:
            table.update({k: v for k, v in evaluation["table"].items() if v is not None})
        rows.append({"model": fitted.spec.variant.value, "fit": str(fit_dir), **table})

        patients = _load_patients(data)
        _check_patients(fitted, patients)
        coefficients = coefficient_summary(fitted.draws, patients, fitted.spec, fitted.standardizer)
        latents_path = fitted.directory / LATENTS_FILE
        latents = pd.read_csv(latents_path) if latents_path.exists() else None
        fits.append(
            {
                "fit": str(fit_dir),
                "variant": fitted.spec.variant.value,
                "unit": data.unit,
                "coefficients": coefficients.to_dict(orient="records"),
                "latents": latents.to_dict(orient="records") if latents is not None else None,
                "evaluation": evaluation,
            }
        )

    artifacts = {
        "report_table": write_table(
            pd.DataFrame(rows, columns=["model", "fit", *TABLE_COLUMNS]), output / "report.csv"
        ),
        "report": write_json({"fits": fits}, output / "report.json"),
    }
    write_manifest(output, "report", {"fits": [str(d) for d in fit_dirs]}, 0, artifacts)
    LOGGER.configure("report")
    LOGGER.info(f"Report of {len(rows)} fits written to {output}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML or JSON configuration file")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    parser.add_argument("-q", "--quiet", action="store_true", help="log warnings and errors only")


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--glucose", dest="data__glucose", help="glucose CSV")
    parser.add_argument("--meals", dest="data__meals", help="meals CSV")
    parser.add_argument("--covariates", dest="data__covariates", type=_names, help="nutrient columns, comma separated")
    parser.add_argument("--train-days", dest="data__train_days", type=_days)
    parser.add_argument("--test-days", dest="data__test_days", type=_days)
    parser.add_argument("--no-standardize", dest="data__standardize", action="store_false", default=None)
    parser.add_argument("--unit", dest="data__unit")
    parser.add_argument("--trajectory-samples", dest="data__trajectory_samples", type=int)


def _add_model(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--variant", dest="model__variant", choices=[v.value for v in ModelVariant])
    parser.add_argument("--inducing-count", dest="model__inducing_count", type=int)
    parser.add_argument("--sigma-x", dest="model__sigma_x", type=float)
    parser.add_argument("--sigma-t", dest="model__sigma_t", type=float)
    parser.add_argument("--sigma-d", dest="model__sigma_d", type=float)


def _add_sampler(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--chains", dest="sampler__chains", type=int)
    parser.add_argument("--warmup", dest="sampler__warmup", type=int)
    parser.add_argument("--draws", dest="sampler__draws", type=int)
    parser.add_argument("--seed", dest="sampler__seed", type=int)
    parser.add_argument("--threads", dest="sampler__threads", type=int)
    parser.add_argument("--target-accept", dest="sampler__target_accept", type=float)
    parser.add_argument("--max-tree-depth", dest="sampler__max_tree_depth", type=int)


def _add_simulation(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--protocol", dest="simulation__protocol", choices=[p.value for p in SimProtocol])
    parser.add_argument("--patients", dest="simulation__n_patients", type=int)
    parser.add_argument("--meals-per-patient", dest="simulation__meals_per_patient", type=int)
    parser.add_argument("--covariate-dim", dest="simulation__covariate_dim", type=int)
    parser.add_argument("--perturb-fraction", dest="simulation__perturb_fraction", type=float)
    parser.add_argument("--perturb-sd", dest="simulation__perturb_sd", type=float)
    parser.add_argument("--response-scale", dest="simulation__response_scale", type=float)
    parser.add_argument("--trend", dest="simulation__trend", choices=[t.value for t in TrendKind])
    parser.add_argument("--time-shift", dest="simulation__time_shift", type=float)
    parser.add_argument("--time-jitter-sd", dest="simulation__time_jitter_sd", type=float)
    parser.add_argument("--seed", dest="simulation__seed", type=int)
    parser.add_argument("--from-fit", help="fit directory replayed by the from_fit protocol")


def _run_fit(args: argparse.Namespace) -> int:
    return fit(build_config(args.config, _overrides(args)), args.output)


def _run_predict(args: argparse.Namespace) -> int:
    fitted = load_fit(args.fit)
    return predict(args.fit, _data_for_fit(fitted, args), args.output)


def _run_evaluate(args: argparse.Namespace) -> int:
    fitted = load_fit(args.fit)
    data = _data_for_fit(fitted, args)
    baseline_data = _data_for_fit(load_fit(args.baseline), args) if args.baseline else None
    return evaluate(args.fit, data, args.baseline, args.output, baseline_data)


def _run_simulate(args: argparse.Namespace) -> int:
    return simulate(build_config(args.config, _overrides(args)), args.output, args.from_fit)


def _run_report(args: argparse.Namespace) -> int:
    return report(args.fits, args.output, args)


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(
        prog="response-trajectories",
        description="Personalized treatment-response trajectories with errors-in-variables.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    fit_parser = commands.add_parser("fit", help="fit a model variant to the training days")
    _add_common(fit_parser)
    _add_data(fit_parser)
    _add_model(fit_parser)
    _add_sampler(fit_parser)
    fit_parser.add_argument("--output", required=True, help="fit directory")
    fit_parser.set_defaults(handler=_run_fit)

    predict_parser = commands.add_parser("predict", help="predict the test days from a fit")
    _add_common(predict_parser)
    _add_data(predict_parser)
    predict_parser.add_argument("--fit", required=True, help="fit directory")
    predict_parser.add_argument("--output", required=True, help="prediction directory")
    predict_parser.set_defaults(handler=_run_predict)

    simulate_parser = commands.add_parser("simulate", help="write a simulated dataset")
    _add_common(simulate_parser)
    _add_model(simulate_parser)
    _add_simulation(simulate_parser)
    simulate_parser.add_argument("--output", required=True, help="dataset directory")
    simulate_parser.set_defaults(handler=_run_simulate)

    evaluate_parser = commands.add_parser("evaluate", help="compute metrics of a fit")
    _add_common(evaluate_parser)
    _add_data(evaluate_parser)
    evaluate_parser.add_argument("--fit", required=True, help="fit directory")
    evaluate_parser.add_argument("--baseline", help="fit directory of the baseline model")
    evaluate_parser.add_argument("--output", help="evaluation directory")
    evaluate_parser.set_defaults(handler=_run_evaluate)

    report_parser = commands.add_parser("report", help="combine fits into a comparison table")
    _add_common(report_parser)
    _add_data(report_parser)
    report_parser.add_argument("fits", nargs="+", help="fit directories")
    report_parser.add_argument("--output", required=True, help="report directory")
    report_parser.set_defaults(handler=_run_report)
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.INFO
    if getattr(args, "verbose", False):
        level = logging.DEBUG
    elif getattr(args, "quiet", False):
        level = logging.WARNING
    logging.getLogger("response_trajectories").setLevel(level)


def main(argv: Sequence[str] | None = None) -> int:
    """
    Runs the command line interface.

    :param argv: The arguments, defaults to ``sys.argv[1:]``.
    :return: The exit code.
    """
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args)
        return args.handler(args)
    except ResponseTrajectoryError as err:
        LOGGER.configure("error")
        LOGGER.error(str(err))
        return err.exit_code
