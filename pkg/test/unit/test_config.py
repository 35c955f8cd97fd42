import json

import pytest
import yaml

from response_trajectories.config import (
    THREADS_VARIABLE,
    DataConfig,
    RunConfig,
    build_config,
    read_config_file,
)
from response_trajectories.data import NUTRIENTS
from response_trajectories.model import ModelVariant
from response_trajectories.utils.exceptions import DomainError, InputFileNotFound, MalformedInput

from . import MSG_NO_MATCH


@pytest.fixture(autouse=True)
def no_thread_variable(monkeypatch):
    monkeypatch.delenv(THREADS_VARIABLE, raising=False)


@pytest.fixture
def yaml_file(tmp_path):
    path = tmp_path / "run.yaml"
    content = {
        "data": {"glucose": "g.csv", "covariates": ["starch", "fat"], "train_days": [0]},
        "model": {"variant": "hier_time_cov", "sigma_x": 0.2},
        "sampler": {"chains": 2, "draws": 50},
    }
    path.write_text(yaml.safe_dump(content))
    return path


def test_defaults():
    config = build_config()
    assert config.data.covariates == NUTRIENTS
    assert config.data.train_days == (0, 1)
    assert config.model.variant is ModelVariant.HIER
    assert config.sampler.chains == 4
    assert config.sampler.threads == 1
    assert config.simulation.protocol.value == "toy"


def test_yaml_file(yaml_file):
    """Test that file sections replace the defaults they name"""
    config = build_config(yaml_file)
    assert config.data.glucose == "g.csv"
    assert config.data.covariates == ("starch", "fat")
    assert config.model.variant is ModelVariant.HIER_TIME_COV
    assert config.model.sigma_x == 0.2
    assert config.sampler.draws == 50
    assert config.sampler.warmup == 1000, MSG_NO_MATCH


def test_json_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"simulation": {"protocol": "generative", "n_patients": 3}}))
    config = build_config(path)
    assert config.simulation.n_patients == 3
    assert config.simulation.protocol.value == "generative"


def test_precedence(yaml_file, monkeypatch):
    """Test defaults < file < environment < flags"""
    monkeypatch.setenv(THREADS_VARIABLE, "3")
    config = build_config(yaml_file, {"sampler": {"chains": 8, "seed": None}, "model": {"variant": "ind"}})
    assert config.sampler.chains == 8
    assert config.sampler.draws == 50
    assert config.sampler.threads == 3
    assert config.sampler.seed == 0
    assert config.model.variant is ModelVariant.IND
    assert config.model.sigma_x == 0.2, MSG_NO_MATCH

    assert build_config(yaml_file, {"sampler": {"threads": 2}}).sampler.threads == 2


def test_invalid_thread_variable(monkeypatch):
    monkeypatch.setenv(THREADS_VARIABLE, "many")
    with pytest.raises(MalformedInput):
        build_config()


@pytest.mark.parametrize(
    "content",
    [
        {"fitting": {"chains": 2}},
        {"sampler": {"chain": 2}},
        {"sampler": {"chains": 0}},
        {"model": {"variant": "full"}},
        {"data": {"train_days": [0, 1], "test_days": [1]}},
        {"sampler": [1, 2]},
        [1, 2],
    ],
)
def test_invalid_file(tmp_path, content):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(content))
    with pytest.raises(MalformedInput) as err:
        build_config(path)
    assert err.value.exit_code == 3


def test_invalid_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("sampler: [chains: 2\n")
    with pytest.raises(MalformedInput):
        read_config_file(path)


def test_missing_file(tmp_path):
    with pytest.raises(InputFileNotFound):
        build_config(tmp_path / "missing.yaml")


def test_empty_file(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert read_config_file(path) == {}


@pytest.mark.parametrize(
    "values",
    [{"covariates": ["salt"]}, {"covariates": []}, {"trajectory_samples": 0}, {"test_days": [0]}],
)
def test_invalid_data_settings(values):
    with pytest.raises(DomainError):
        DataConfig(**values)


def test_to_dict_round_trip(yaml_file):
    """Test that a dumped configuration builds the same configuration"""
    config = build_config(yaml_file)
    path = yaml_file.parent / "dumped.yaml"
    path.write_text(yaml.safe_dump(config.to_dict()))
    assert build_config(path) == config
    assert isinstance(config, RunConfig)
