import json

import pytest

from coreaging.aging import SECONDS_PER_YEAR, worst_case_drop
from coreaging.config import DEFAULTS, ConfigError, ExperimentConfig


def test_defaults_validate():
    cfg = ExperimentConfig()
    assert cfg.machines == 22 and cfg.cores_per_vm == 40
    assert cfg.policies == ["proposed", "linux", "least_aged"]
    assert cfg.mean_p == 1.0


def test_calibrated_by_default():
    p = ExperimentConfig().aging_params()
    assert worst_case_drop(p, 10 * SECONDS_PER_YEAR) == pytest.approx(0.3, rel=1e-9)


def test_explicit_k_and_params_file(tmp_path):
    cfg = ExperimentConfig().updated(aging={"k_fit": 0.5})
    assert cfg.aging_params().k_fit == 0.5
    params = ExperimentConfig().aging_params()
    (tmp_path / "p.json").write_text(json.dumps({"params": params.to_dict()}))
    (tmp_path / "c.json").write_text(json.dumps({"aging": {"params_file": "p.json"}}))
    assert ExperimentConfig.load(tmp_path / "c.json").aging_params() == params


@pytest.mark.parametrize(
    "override",
    [
        {"cluster": {"machines": 0}},
        {"seeds": []},
        {"workload": {"rates": []}},
        {"workload": {"rates": [-1]}},
        {"workload": {"source": "file"}},
        {"policy": {"policies": ["random"]}},
        {"policy": {"age_metric": "temperature"}},
        {"policy": {"pos_gain": 2.0}},
        {"aging": {"calibration": {"target_drop": 0.0}}},
        {"aging": {"v_dd": 0.1}},
        {"aging_time_scale": 0},
        {"unknown": 1},
        {"cluster": {"gpus": 8}},
        {"schema_version": 99},
        {"workload": {"durations": {"submit": {"base": -1.0}}}},
    ],
)
def test_invalid_configs(override):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(override)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[]")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(arr)


def test_digest_tracks_content():
    a = ExperimentConfig()
    b = ExperimentConfig.from_dict(json.loads(a.to_json()))
    c = a.updated(seeds=[1])
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    assert DEFAULTS["seeds"] == [0]  # defaults untouched by updates


def test_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "c.json").write_text("{}")
    cfg = ExperimentConfig.load(tmp_path / "c.json")
    assert cfg.resolve("trace.csv") == tmp_path / "trace.csv"
