import json
import math
from pathlib import Path

import pytest

from src.config import OUTPUT_DIR_ENV, ConfigError, ExperimentConfig, load_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def test_defaults_are_the_calibrated_parameters():
    config = ExperimentConfig()
    params = config.params()
    assert params.log_sigma == pytest.approx(-0.05)
    assert (config.delta, config.b, config.beta, config.theta) == (1e-4, 0.25, 0.5, 0.1)
    assert config.ensemble.kind == "grid" and config.ensemble.size == 10_000


def test_load_committed_configs(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    default = load_config(CONFIGS / "default.json")
    assert default.map == "intermittent"
    assert default.sigma == pytest.approx(math.exp(-0.05))
    doubling = load_config(CONFIGS / "doubling.json")
    assert doubling.map == "doubling" and doubling.sigma == 0.5


def test_b_bound_is_enforced_with_the_inequality_echoed(tmp_path):
    path = write(tmp_path, {"b": 0.6, "beta": 0.5})
    with pytest.raises(ConfigError, match=r"b < min\(1/2, 1/\(4\*beta\)\) violated"):
        load_config(path, env=False)


@pytest.mark.parametrize("data, fragment", [
    ({"map": "tent"}, "unknown map"),
    ({"experiments": ["detect", "plot"]}, "unknown experiment"),
    ({"sigma": 1.5}, "sigma"),
    ({"ensemble": {"kind": "sobol"}}, "ensemble.kind"),
    ({"verify": {"slow_recurrence_deltas": [0.01, 0.1]}}, "must not increase"),
    ({"ulam": {"pushforward_times": [10]}}, "at least two strictly increasing"),
    ({"ulam": {"pushforward_times": [100, 10]}}, "at least two strictly increasing"),
    ({"colour": "red"}, "colour"),
])
def test_invalid_configs(tmp_path, data, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(write(tmp_path, data), env=False)


def test_unreadable_configs(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
    with pytest.raises(ConfigError, match="object"):
        load_config(write(tmp_path, [1, 2]))


def test_output_dir_override(tmp_path, monkeypatch):
    path = write(tmp_path, {"output_dir": "results"})
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "elsewhere"))
    assert load_config(path).output_dir == str(tmp_path / "elsewhere")
    assert load_config(path, env=False).output_dir == "results"


def test_slow_recurrence_schedule():
    config = ExperimentConfig(verify={"slow_recurrence_deltas": [0.1, 0.01]})
    assert config.verify.slow_recurrence_schedule() == [(1, 0.1), (2, 0.01)]
