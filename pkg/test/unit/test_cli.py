import json

import pandas as pd
import pytest
import yaml

from response_trajectories import cli
from response_trajectories.artifacts import DRAWS_FILE, FIT_FILE, MANIFEST_FILE, SUMMARY_FILE, TRAJECTORY_FILE
from response_trajectories.data import ingest
from response_trajectories.metrics import TABLE_COLUMNS
from response_trajectories.utils.exceptions import DomainError, SamplerFailure, StructuralError

from . import MSG_NO_MATCH

FIT_FLAGS = [
    "--covariates", "starch,sugar",
    "--inducing-count", "6",
    "--trajectory-samples", "5",
    "--max-tree-depth", "3",
    "--seed", "3",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A simulated toy dataset of two patients with hourly observations."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "simulation.yaml"
    config.write_text(yaml.safe_dump({"simulation": {"cadence": 60.0}}))
    output = root / "data"
    code = cli.main(
        ["simulate", "--config", str(config), "--output", str(output), "--patients", "2", "--meals-per-patient", "4", "--seed", "1"]
    )
    assert code == 0
    return output


@pytest.fixture(scope="module")
def fitted(dataset):
    """A short fit of the hierarchical model with time errors."""
    output = dataset.parent / "fit"
    code = cli.main(
        [
            "fit",
            "--glucose", str(dataset / "glucose.csv"),
            "--meals", str(dataset / "meals.csv"),
            "--variant", "hier_time",
            "--chains", "2",
            "--warmup", "20",
            "--draws", "10",
            "--output", str(output),
            *FIT_FLAGS,
        ]
    )
    assert code in (0, 2)
    return output


def _inputs(dataset):
    return ["--glucose", str(dataset / "glucose.csv"), "--meals", str(dataset / "meals.csv")]


def test_simulated_dataset(dataset):
    """Test that the simulation writes an ingestible dataset, its truth and a manifest"""
    patients = ingest(dataset / "glucose.csv", dataset / "meals.csv", covariates=("starch", "sugar"))
    assert [p.patient_id for p in patients] == ["p00", "p01"]
    assert patients[0].n_obs == 72
    truth = json.loads((dataset / "truth.json").read_text())
    assert truth["protocol"] == "toy"
    manifest = json.loads((dataset / MANIFEST_FILE).read_text())
    assert manifest["command"] == "simulate"
    assert manifest["config"]["simulation"]["cadence"] == 60.0, MSG_NO_MATCH


def test_fit_artifacts(fitted):
    """Test that a fit writes its draws, summary, trajectories and manifest"""
    for name in (DRAWS_FILE, FIT_FILE, SUMMARY_FILE, TRAJECTORY_FILE, MANIFEST_FILE, "latents.csv", "pointwise_loglik.npz"):
        assert (fitted / name).exists(), name
    draws = pd.read_csv(fitted / DRAWS_FILE)
    assert len(draws) == 20
    assert "report_bias[p00]" in draws.columns
    summary = json.loads((fitted / SUMMARY_FILE).read_text())
    assert summary["variant"] == "hier_time"
    manifest = json.loads((fitted / MANIFEST_FILE).read_text())
    assert manifest["seed"] == 3
    assert set(manifest["inputs"]) == {"glucose", "meals"}


def test_predict(fitted, dataset, tmp_path):
    code = cli.main(["predict", "--fit", str(fitted), "--output", str(tmp_path), *_inputs(dataset)])
    assert code == 0
    prediction = pd.read_csv(tmp_path / cli.PREDICTION_FILE)
    assert len(prediction) == 48, MSG_NO_MATCH
    assert set(prediction["split"]) == {"test"}


def test_predict_with_fit_settings(fitted, tmp_path):
    """Test that predict falls back on the data settings stored with the fit"""
    assert cli.main(["predict", "--fit", str(fitted), "--output", str(tmp_path)]) == 0


def test_evaluate_and_report(fitted, tmp_path):
    """Test the evaluation against a baseline and the comparison table"""
    code = cli.main(["evaluate", "--fit", str(fitted), "--baseline", str(fitted)])
    assert code == 0
    evaluation = json.loads((fitted / cli.EVALUATION_DIR / cli.EVALUATION_FILE).read_text())
    assert set(evaluation["table"]) == set(TABLE_COLUMNS)
    assert evaluation["loo"] is None
    assert evaluation["variant"] == "hier_time"

    code = cli.main(["report", str(fitted), str(fitted), "--output", str(tmp_path)])
    assert code == 0
    table = pd.read_csv(tmp_path / "report.csv")
    assert list(table.columns) == ["model", "fit", *TABLE_COLUMNS], MSG_NO_MATCH
    assert table["model"].tolist() == ["hier_time", "hier_time"]
    content = json.loads((tmp_path / "report.json").read_text())
    assert len(content["fits"][0]["coefficients"]) == 4
    assert content["fits"][0]["latents"] is not None


def test_simulate_from_fit(fitted, tmp_path):
    code = cli.main(["simulate", "--protocol", "from_fit", "--from-fit", str(fitted), "--output", str(tmp_path)])
    assert code == 0
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert truth["protocol"] == "from_fit"
    assert [p["patient_id"] for p in truth["patients"]] == ["p00", "p01"]


def test_from_fit_needs_a_fit(tmp_path):
    assert cli.main(["simulate", "--protocol", "from_fit", "--output", str(tmp_path)]) == 3


@pytest.mark.parametrize(
    "argv",
    [[], ["fit"], ["fit", "--output", "out", "--chains", "two"], ["train", "--output", "out"], ["fit", "--output", "out"]],
)
def test_usage_errors(argv):
    assert cli.main(argv) == 3


def test_version(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--version"])
    assert "response-trajectories" in capsys.readouterr().out


def test_missing_fit(tmp_path):
    assert cli.main(["predict", "--fit", str(tmp_path / "none"), "--output", str(tmp_path)]) == 3


def test_missing_input(dataset, tmp_path):
    argv = ["fit", "--glucose", str(tmp_path / "none.csv"), "--meals", str(dataset / "meals.csv"), "--output", str(tmp_path)]
    assert cli.main(argv) == 3


@pytest.mark.parametrize(
    "days",
    [
        ["--train-days", "0,1", "--test-days", "1"],
        ["--train-days", "5", "--test-days", "6"],
    ],
)
def test_invalid_day_split(dataset, tmp_path, days):
    """Test that overlapping days and days without observations are input errors"""
    argv = ["fit", *_inputs(dataset), *days, "--output", str(tmp_path), *FIT_FLAGS]
    assert cli.main(argv) == 3, MSG_NO_MATCH


def test_argument_errors_are_input_errors():
    assert DomainError("x", -1, "> 0").exit_code == 3
    assert StructuralError("layout").exit_code == 3


def test_sampler_failure(dataset, tmp_path, monkeypatch):
    """Test that numerical failures exit with their own code"""

    def fail(*args, **kwargs):
        raise SamplerFailure("no finite density at the initial point")

    monkeypatch.setattr(cli, "nuts_sample", fail)
    argv = ["fit", *_inputs(dataset), "--output", str(tmp_path), *FIT_FLAGS]
    assert cli.main(argv) == 4


def test_convergence_problems(dataset, tmp_path, monkeypatch):
    """Test that a fit with unconverged parameters still writes its artifacts and exits with 2"""
    monkeypatch.setattr(cli, "convergence_problems", lambda table, threshold=1.05: ["sigma_y[p00]"])
    argv = ["fit", *_inputs(dataset), "--chains", "1", "--warmup", "0", "--draws", "8", "--variant", "ind", "--output", str(tmp_path), *FIT_FLAGS]
    assert cli.main(argv) == 2
    summary = json.loads((tmp_path / SUMMARY_FILE).read_text())
    assert summary["convergence_problems"] == ["sigma_y[p00]"]
    assert (tmp_path / DRAWS_FILE).exists()
