import json
import os

import pytest

from gpuleak import cli
from gpuleak.config import ConfigError, ExperimentConfig, parse_params

SMALL_INI = """
[sim]
alloc_bytes = 262144
[topology]
dram_bytes = 67108864
page_bytes = 1024
[cache]
num_sets = 64
ways = 4
[probe]
count = 64
trials = 3
[covert]
pairs = 1,2
random_bits = 256
[sidechan]
monitored_sets = 16
num_epochs = 16
train_per_label = 5
test_per_label = 2
labels = vectoradd,quasirandom
[mlp]
sizes = 64,128
calibration_runs = 3
test_runs = 1
monitored_sets = 16
"""


@pytest.fixture
def small_ini(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL_INI)
    return str(p)


def test_defaults_load():
    cfg = ExperimentConfig.load()
    assert cfg.cache().num_sets == 2048 and cfg.cache().ways == 16
    assert cfg.pairs() == [1, 2, 4, 8, 16]
    assert cfg.latency().means == (270.0, 470.0, 650.0, 850.0)
    assert cfg.layout().quantum_cycles == 2000


@pytest.mark.parametrize("text", [
    "[nope]\nx = 1\n", "[sim]\nseeed = 1\n", "[sim]\nseed = abc\n", "[cache]\nnum_sets = 100\n",
    "[topology]\nlinks = 0-x\n", "[covert]\npairs = 0\n", "[workload]\nkind = nope\n",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(text=text)


def test_flags_override():
    cfg = ExperimentConfig.load(text="[sim]\nseed = 3\n")
    cfg.apply_flags(seed=9, pairs=4, noise=0.0)
    assert cfg.seed == 9 and cfg.pairs() == [4]
    assert cfg.latency().sigmas == (0.0,) * 4 and cfg.latency().contention_coeff == 0.0
    assert cfg.base_latency().sigmas == (12.0, 25.0, 20.0, 30.0)


def test_to_ini_roundtrip():
    cfg = ExperimentConfig.load(text="[covert]\npairs = 2,4\n")
    assert ExperimentConfig.load(text=cfg.to_ini()).values == cfg.values


def test_parse_params():
    assert parse_params("neurons=64, epochs=2", "mlp") == {"neurons": 64, "epochs": 2}
    with pytest.raises(ConfigError):
        parse_params("width=3", "mlp")


def test_exit_code_config(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[sim]\nbogus = 1\n")
    assert cli.main(["calibrate", "--config", str(p), "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_exit_code_no_nvlink(tmp_path):
    p = tmp_path / "far.ini"
    p.write_text("[sim]\nspy_gpu = 5\n")
    assert cli.main(["calibrate", "--config", str(p), "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG


def test_exit_code_incomplete_set(tmp_path, small_ini):
    p = tmp_path / "budget.ini"
    p.write_text(SMALL_INI.replace("count = 64", "count = 1\nsearch_budget = 8"))
    assert cli.main(["discover", "--config", str(p), "--out-dir", str(tmp_path)]) == cli.EXIT_INCOMPLETE_SET


def test_exit_code_training(tmp_path):
    p = tmp_path / "few.ini"
    p.write_text(SMALL_INI.replace("train_per_label = 5", "train_per_label = 2"))
    assert cli.main(["fingerprint", "train", "--config", str(p), "--out-dir", str(tmp_path)]) == cli.EXIT_TRAINING


def test_exit_code_empty_calibration(tmp_path):
    p = tmp_path / "empty.ini"
    p.write_text(SMALL_INI.replace("calibration_runs = 3", "calibration_runs = 0"))
    assert cli.main(["mlp-extract", "--config", str(p), "--out-dir", str(tmp_path)]) == cli.EXIT_EMPTY_CALIBRATION


def test_discover_with_thresholds_file(tmp_path, small_ini):
    out = str(tmp_path)
    assert cli.main(["calibrate", "--config", small_ini, "--out-dir", out]) == 0
    thr = os.path.join(out, "thresholds.json")
    assert cli.main(["discover", "--config", small_ini, "--out-dir", out, "--thresholds", thr]) == 0
    policy = json.loads(open(os.path.join(out, "policy.json")).read())
    assert policy["inferred_ways"] == 4 and policy["sets_found"] == 64
    assert policy["schema_version"] == 1 and policy["seed"] == 0


def test_fingerprint_model_path(tmp_path, small_ini):
    model = str(tmp_path / "models" / "m.json")
    os.makedirs(os.path.dirname(model))
    out = str(tmp_path / "out")
    assert cli.main(["fingerprint", "train", "--config", small_ini, "--out-dir", out, "--model", model]) == 0
    assert cli.main(["fingerprint", "eval", "--config", small_ini, "--out-dir", out, "--model", model]) == 0
    report = json.loads(open(os.path.join(out, "fingerprint_report.json")).read())
    assert report["accuracy"] == 1.0 and report["test_samples"] == 4


def test_covert_pairs_flag(tmp_path, small_ini):
    assert cli.main(["covert", "--config", small_ini, "--out-dir", str(tmp_path), "--pairs", "2", "--noise", "0"]) == 0
    doc = json.loads((tmp_path / "covert.json").read_text())
    assert [r["pairs"] for r in doc["sweep"]] == [2]
    assert doc["message"]["received"] == "Hello! How are you? "
