import pytest
import yaml

from config import Config, ExperimentConfig, TrainConfig
from errors import ConfigError


@pytest.fixture
def config():
    return Config(use_environment=False)


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return str(path)


def test_defaults_validate(config):
    assert config.validate_config()
    assert config.get("system.scheme") == "psgs-2/3"
    assert config.get("training.adam.beta2") == 0.999
    assert config.get("no.such.key", "fallback") == "fallback"


def test_file_is_merged_over_defaults(tmp_path):
    path = write_yaml(tmp_path / "run.yaml", {"system": {"m": 4}, "training": {"adam": {"beta1": 0.8}}})
    config = Config(path, use_environment=False)
    assert config.get("system.m") == 4
    assert config.get("system.scheme") == "psgs-2/3"
    assert config.get("training.adam.beta1") == 0.8
    assert config.get("training.adam.beta2") == 0.999


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        Config(str(tmp_path / "absent.yaml"), use_environment=False)


def test_file_must_hold_a_mapping(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        Config(str(path), use_environment=False)


def test_overrides_parse_yaml_values(config):
    config.apply_overrides(["training.iterations=20", "experiment.snr_grid=[0, 5, 10]",
                            "system.scheme=uniform-qam", "experiment.ber.code_rate=1/2"])
    assert config.get("training.iterations") == 20
    assert config.snr_grid() == [0.0, 5.0, 10.0]
    assert config.get("system.scheme") == "uniform-qam"
    assert config.get("experiment.ber.code_rate") == "1/2"
    config.validate_config()


def test_malformed_override(config):
    with pytest.raises(ConfigError):
        config.apply_overrides(["training.iterations"])


def test_every_problem_is_reported(config):
    config.apply_overrides(["system.scheme=apsk", "training.batch_size=0", "experiment.ber.code_rate=5/6"])
    with pytest.raises(ConfigError) as excinfo:
        config.validate_config()
    assert len(excinfo.value.problems) == 3
    assert "system.scheme" in str(excinfo.value)


@pytest.mark.parametrize("override", [
    "version=2", "system.channel=rayleigh", "system.m=1", "training.learning_rate=0",
    "training.seeds=[]", "training.snr_range.awgn=[10, 0]", "experiment.snr_grid=[5, 5]",
    "demapper.activation=relu",
])
def test_invalid_values(config, override):
    config.apply_overrides([override])
    with pytest.raises(ConfigError):
        config.validate_config()


def test_exact_demapper_needs_awgn(config):
    config.apply_overrides(["system.channel=rbf", "training.demapper=exact"])
    with pytest.raises(ConfigError):
        config.validate_config()


def test_qam_schemes_need_even_m(config):
    config.apply_overrides(["system.scheme=mbqam-2/3", "system.m=5"])
    with pytest.raises(ConfigError):
        config.validate_config()


def test_default_grid_follows_channel_range(config):
    assert config.snr_grid() == [float(x) for x in range(0, 21)]
    config.set("system.channel", "rbf")
    assert config.snr_range() == (5.0, 25.0)
    assert config.snr_grid()[0] == 5.0 and config.snr_grid()[-1] == 25.0


def test_environment_overrides(monkeypatch, tmp_path):
    monkeypatch.setenv("LOG_LEVEL", "DEBUG")
    monkeypatch.setenv("SHAPING_RESULTS_DIR", str(tmp_path / "out"))
    monkeypatch.delenv("SHAPING_CHECKPOINT_DIR", raising=False)
    config = Config()
    assert config.get("logging.level") == "DEBUG"
    assert config.get("directories.results") == str(tmp_path / "out")
    assert config.get("directories.checkpoints") == "checkpoints"


def test_save_config_round_trip(config, tmp_path):
    config.apply_overrides(["training.iterations=7"])
    path = config.save_config(tmp_path / "nested" / "saved.yaml")
    reloaded = Config(str(path), use_environment=False)
    assert reloaded.settings == config.settings


def test_create_directories(config, tmp_path):
    for name in ("checkpoints", "results", "logs"):
        config.set(f"directories.{name}", str(tmp_path / name))
    config.create_directories()
    assert all((tmp_path / name).is_dir() for name in ("checkpoints", "results", "logs"))


def test_train_config_from_config(config):
    config.apply_overrides(["system.channel=rbf", "training.seeds=[3, 4]", "demapper.hidden_units=16"])
    settings = TrainConfig.from_config(config)
    assert settings.channel == "rbf"
    assert settings.snr_range == (5.0, 25.0)
    assert settings.seeds == (3, 4)
    assert settings.demapper_settings["hidden_units"] == 16


def test_experiment_config_from_config(config):
    config.apply_overrides(["experiment.snr_grid=[2, 4]", "experiment.checkpoint=best.params",
                            "experiment.ber.min_errors=10"])
    settings = ExperimentConfig.from_config(config)
    assert settings.snr_grid == (2.0, 4.0)
    assert settings.checkpoint == "best.params"
    assert settings.ber.min_errors == 10
    assert settings.ber.code_rate == "2/3"


def test_experiment_config_invariants():
    with pytest.raises(ConfigError):
        ExperimentConfig(snr_grid=())
    with pytest.raises(ConfigError):
        ExperimentConfig(snr_grid=(3.0, 1.0))
    with pytest.raises(ConfigError):
        ExperimentConfig(samples_per_point=0)
