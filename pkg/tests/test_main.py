import csv
import json
import logging

import pytest

import training
from errors import NumericalFailure
from main import build_parser, main


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def dirs(tmp_path, monkeypatch):
    for variable in ("LOG_LEVEL", "SHAPING_RESULTS_DIR", "SHAPING_CHECKPOINT_DIR"):
        monkeypatch.delenv(variable, raising=False)
    return [f"--set=directories.{name}={tmp_path / name}" for name in ("checkpoints", "results", "logs")]


def read_series(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_parser_rejects_unknown_verb():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["eval-fer"])


def test_bad_scheme_exits_with_config_error(dirs):
    assert main(["eval-se", "--scheme", "apsk", *dirs]) == 2


def test_missing_config_file_exits_with_config_error(dirs, tmp_path):
    assert main(["eval-se", "--config", str(tmp_path / "absent.yaml"), *dirs]) == 2


def test_trainable_scheme_without_checkpoint(dirs):
    assert main(["eval-bmi", "--scheme", "psgs-2/3", *dirs]) == 3


def test_eval_se_for_uniform_qam(dirs, tmp_path):
    assert main(["eval-se", "--scheme", "uniform-qam", "--set", "experiment.snr_grid=[0, 10]", *dirs]) == 0
    rows = read_series(tmp_path / "results" / "uniform-qam_awgn_se.csv")
    assert rows[0] == ["es_n0_db", "value", "stderr"]
    assert [float(row[1]) for row in rows[1:]] == pytest.approx([4.0, 4.0])
    entropy = read_series(tmp_path / "results" / "uniform-qam_awgn_entropy.csv")
    assert float(entropy[1][1]) == pytest.approx(6.0)


def test_eval_bmi_writes_series_and_manifest(dirs, tmp_path):
    argv = ["eval-bmi", "--scheme", "uniform-qam", "--seed", "11", "--set", "experiment.snr_grid=[5, 15]",
            "--set", "experiment.samples_per_point=2000", *dirs]
    assert main(argv) == 0
    results = tmp_path / "results"
    rows = read_series(results / "uniform-qam_awgn_bmi.csv")
    assert [row[0] for row in rows[1:]] == ["5", "15"]
    assert float(rows[1][1]) < float(rows[2][1]) <= 6.0
    assert len(read_series(results / "capacity_awgn.csv")) == 3

    manifest = json.loads((results / "uniform-qam_awgn_bmi_manifest.json").read_text())
    assert manifest["seed"] == 11
    assert manifest["checkpoint"] is None
    assert set(manifest["source_entropy"]) == {"5", "15"}
    assert (tmp_path / "logs" / "shaping.log").exists()


def test_export_constellation(dirs, tmp_path):
    assert main(["export-constellation", "--scheme", "uniform-qam", "--set", "system.m=4",
                 "--snr", "7", *dirs]) == 0
    rows = read_series(tmp_path / "results" / "constellations" / "uniform-qam_awgn_7dB.csv")
    assert rows[0] == ["index", "label", "re", "im", "probability"]
    assert len(rows) == 17
    assert sum(float(row[4]) for row in rows[1:]) == pytest.approx(1.0)


def test_every_seed_failing_exits_with_numerical_failure(dirs, monkeypatch, tmp_path):
    def diverge(*args, **kwargs):
        raise NumericalFailure("non-finite loss", snr_db=4.0, term="bmi")

    monkeypatch.setattr(training, "loss_estimate", diverge)
    argv = ["train", "--scheme", "psgs-1/2", "--set", "system.m=2", "--set", "training.iterations=2",
            "--set", "training.seeds=[0, 1]", "--set", "training.hidden_units=4", *dirs]
    assert main(argv) == NumericalFailure.exit_code == 4
    assert not (tmp_path / "checkpoints" / "psgs-12_awgn_best.params").exists()
