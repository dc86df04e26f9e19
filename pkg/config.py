"""
Configuration Module
Contains all configuration settings for the shaping experiments
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml
from dotenv import load_dotenv

from errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1

DEFAULT_CONFIG = {
    "version": CONFIG_VERSION,

    # What is being simulated
    "system": {
        "scheme": "psgs-2/3",  # psgs-2/3, psgs-1/2, mbqam-2/3, gs, uniform-qam
        "channel": "awgn",  # awgn, rbf
        "m": 6,  # bits per channel use
    },

    # Optimization settings
    "training": {
        "batch_size": 1000,
        "learning_rate": 1e-3,
        "snr_range": {
            "awgn": [0.0, 20.0],
            "rbf": [5.0, 25.0],
        },
        "iterations": 10000,
        "patience": 1000,
        "validation_interval": 250,
        "log_interval": 100,
        "seeds": [0, 1, 2, 3, 4],
        "hidden_units": 64,
        "adam": {
            "beta1": 0.9,
            "beta2": 0.999,
            "epsilon": 1e-8,
        },
        "validation": {
            "realizations": 10000,
            "seed": 12345,
        },
        "demapper": "auto",  # auto, exact, nn
    },

    # Neural demapper architecture
    "demapper": {
        "hidden_units": 128,
        "hidden_layers": 3,
        "activation": "tanh",
    },

    # Evaluation settings
    "experiment": {
        "snr_grid": None,  # None: 1 dB steps over the training range
        "samples_per_point": 100000,
        "seed": 2024,
        "checkpoint": None,  # None: best checkpoint of the scheme in directories.checkpoints
        "workers": 1,
        "rbf_block_length": 1,
        "ber": {
            "code_rate": "2/3",
            "min_codewords": 100,
            "max_codewords": 10000,
            "min_errors": 100,
            "max_iterations": 100,
        },
    },

    # Directories
    "directories": {
        "checkpoints": "checkpoints",
        "results": "results",
        "logs": "logs",
    },

    # Logging settings
    "logging": {
        "level": "INFO",
        "file": "shaping.log",
    },
}

ENVIRONMENT_OVERRIDES = {
    "LOG_LEVEL": "logging.level",
    "SHAPING_RESULTS_DIR": "directories.results",
    "SHAPING_CHECKPOINT_DIR": "directories.checkpoints",
}

SCHEMES = ("psgs-2/3", "psgs-1/2", "mbqam-2/3", "gs", "uniform-qam")
CHANNELS = ("awgn", "rbf")
DEMAPPERS = ("auto", "exact", "nn")
CODE_RATES = ("1/2", "2/3")


class Config:
    def __init__(self, config_file: Optional[str] = None, use_environment: bool = True):
        self.config_file = config_file
        self.settings = self.load_config()
        if use_environment:
            self.apply_environment()

    def load_config(self) -> Dict[str, Any]:
        """Load configuration from file merged over the defaults"""
        default_config = copy.deepcopy(DEFAULT_CONFIG)
        if self.config_file is None:
            return default_config

        if not os.path.exists(self.config_file):
            raise ConfigError(f"config file not found: {self.config_file}")
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                loaded_config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {self.config_file}: {e}") from e
        if not isinstance(loaded_config, dict):
            raise ConfigError(f"{self.config_file} must hold a mapping at the top level")
        return self._merge_configs(default_config, loaded_config)

    def _merge_configs(self, default: Dict, loaded: Dict) -> Dict:
        """Recursively merge loaded config with defaults"""
        for key, value in loaded.items():
            if key in default and isinstance(value, dict) and isinstance(default[key], dict):
                default[key] = self._merge_configs(default[key], value)
            else:
                default[key] = value
        return default

    def apply_environment(self):
        load_dotenv()
        for variable, key_path in ENVIRONMENT_OVERRIDES.items():
            value = os.getenv(variable)
            if value:
                self.set(key_path, value)
                logger.debug(f"{key_path} overridden by ${variable}")

    def save_config(self, path: Optional[str] = None):
        """Save the resolved configuration as YAML"""
        path = Path(path or self.config_file or "config.yaml")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.settings, f, sort_keys=False)
        logger.info(f"Configuration saved to {path}")
        return path

    def get(self, key_path: str, default=None):
        """Get a configuration value using dot notation (e.g., 'training.batch_size')"""
        value = self.settings
        for key in key_path.split("."):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def set(self, key_path: str, value):
        """Set a configuration value using dot notation"""
        keys = key_path.split(".")
        config = self.settings
        for key in keys[:-1]:
            if not isinstance(config.get(key), dict):
                config[key] = {}
            config = config[key]
        config[keys[-1]] = value

    def apply_overrides(self, overrides: List[str]):
        """Apply 'key=value' strings; values are parsed as YAML scalars or lists"""
        for override in overrides or []:
            if "=" not in override:
                raise ConfigError(f"override '{override}' is not of the form key=value")
            key_path, raw = override.split("=", 1)
            try:
                value = yaml.safe_load(raw)
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse override '{override}': {e}") from e
            self.set(key_path.strip(), value)

    def create_directories(self):
        """Create all required directories"""
        for dir_name, dir_path in self.get("directories", {}).items():
            Path(dir_path).mkdir(parents=True, exist_ok=True)
            logger.debug(f"Created directory: {dir_path}")

    def snr_range(self, channel: Optional[str] = None) -> Tuple[float, float]:
        channel = channel or self.get("system.channel")
        ranges = self.get("training.snr_range")
        bounds = ranges.get(channel) if isinstance(ranges, dict) else ranges
        if bounds is None or len(bounds) != 2:
            raise ConfigError(f"no training SNR range for channel '{channel}'")
        return float(bounds[0]), float(bounds[1])

    def snr_grid(self) -> List[float]:
        grid = self.get("experiment.snr_grid")
        if grid is None:
            lo, hi = self.snr_range()
            return [float(x) for x in np.arange(lo, hi + 0.5, 1.0)]
        return [float(x) for x in grid]

    def validate_config(self) -> bool:
        """Validate configuration settings; raises ConfigError listing every problem"""
        errors = []

        if self.get("version") != CONFIG_VERSION:
            errors.append(f"unsupported config version {self.get('version')!r} (expected {CONFIG_VERSION})")
        if self.get("system.scheme") not in SCHEMES:
            errors.append(f"system.scheme must be one of {SCHEMES}")
        if self.get("system.channel") not in CHANNELS:
            errors.append(f"system.channel must be one of {CHANNELS}")

        m = self.get("system.m")
        if not isinstance(m, int) or m < 2:
            errors.append("system.m must be an integer >= 2")
        elif self.get("system.scheme") in ("mbqam-2/3", "uniform-qam") and m % 2:
            errors.append("QAM based schemes need an even system.m")

        if not self._positive_int("training.batch_size"):
            errors.append("training.batch_size must be a positive integer")
        learning_rate = self.get("training.learning_rate")
        if not isinstance(learning_rate, (int, float)) or learning_rate <= 0:
            errors.append("training.learning_rate must be > 0")
        iterations = self.get("training.iterations")
        if not isinstance(iterations, int) or iterations < 0:
            errors.append("training.iterations must be a non-negative integer")
        for key in ("training.patience", "training.validation_interval", "training.log_interval",
                    "training.validation.realizations"):
            if not self._positive_int(key):
                errors.append(f"{key} must be a positive integer")
        seeds = self.get("training.seeds")
        if not isinstance(seeds, list) or not seeds:
            errors.append("training.seeds must be a non-empty list")
        if self.get("training.demapper") not in DEMAPPERS:
            errors.append(f"training.demapper must be one of {DEMAPPERS}")
        elif self.get("training.demapper") == "exact" and self.get("system.channel") != "awgn":
            errors.append("the exact demapper needs channel 'awgn'")

        try:
            lo, hi = self.snr_range()
            if not lo < hi:
                errors.append("training.snr_range needs lo < hi")
        except (ConfigError, TypeError, ValueError) as e:
            errors.append(str(e))

        try:
            grid = self.snr_grid()
            if not grid:
                errors.append("experiment.snr_grid must not be empty")
            elif any(b <= a for a, b in zip(grid, grid[1:])):
                errors.append("experiment.snr_grid must be strictly increasing")
        except (ConfigError, TypeError, ValueError) as e:
            errors.append(f"experiment.snr_grid: {e}")

        for key in ("experiment.samples_per_point", "experiment.workers", "experiment.rbf_block_length",
                    "experiment.ber.min_codewords", "experiment.ber.max_codewords",
                    "experiment.ber.min_errors", "experiment.ber.max_iterations",
                    "demapper.hidden_units", "demapper.hidden_layers"):
            if not self._positive_int(key):
                errors.append(f"{key} must be a positive integer")
        if str(self.get("experiment.ber.code_rate")) not in CODE_RATES:
            errors.append(f"experiment.ber.code_rate must be one of {CODE_RATES}")
        if self.get("demapper.activation") not in ("tanh", "softplus"):
            errors.append("demapper.activation must be 'tanh' or 'softplus'")

        if errors:
            raise ConfigError("invalid configuration", errors)
        logger.debug("Configuration validation passed")
        return True

    def _positive_int(self, key_path: str) -> bool:
        value = self.get(key_path)
        return isinstance(value, int) and not isinstance(value, bool) and value >= 1


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "psgs-2/3"
    channel: str = "awgn"
    m: int = 6
    batch_size: int = 1000
    learning_rate: float = 1e-3
    snr_range: Tuple[float, float] = (0.0, 20.0)
    iterations: int = 10000
    patience: int = 1000
    validation_interval: int = 250
    log_interval: int = 100
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    validation_realizations: int = 10000
    validation_seed: int = 12345
    hidden_units: int = 64
    demapper: str = "auto"
    demapper_settings: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        problems = []
        if not self.snr_range[0] < self.snr_range[1]:
            problems.append(f"snr range {self.snr_range} needs lo < hi")
        if self.batch_size < 1:
            problems.append("batch size must be >= 1")
        if self.learning_rate <= 0:
            problems.append("learning rate must be > 0")
        if problems:
            raise ConfigError("invalid training settings", problems)

    @classmethod
    def from_config(cls, config: Config) -> "TrainConfig":
        config.validate_config()
        return cls(
            scheme=config.get("system.scheme"),
            channel=config.get("system.channel"),
            m=config.get("system.m"),
            batch_size=config.get("training.batch_size"),
            learning_rate=float(config.get("training.learning_rate")),
            snr_range=config.snr_range(),
            iterations=config.get("training.iterations"),
            patience=config.get("training.patience"),
            validation_interval=config.get("training.validation_interval"),
            log_interval=config.get("training.log_interval"),
            seeds=tuple(config.get("training.seeds")),
            beta1=float(config.get("training.adam.beta1")),
            beta2=float(config.get("training.adam.beta2")),
            epsilon=float(config.get("training.adam.epsilon")),
            validation_realizations=config.get("training.validation.realizations"),
            validation_seed=config.get("training.validation.seed"),
            hidden_units=config.get("training.hidden_units"),
            demapper=config.get("training.demapper"),
            demapper_settings=dict(config.get("demapper")),
        )


@dataclass(frozen=True)
class BerSettings:
    code_rate: str = "2/3"
    min_codewords: int = 100
    max_codewords: int = 10000
    min_errors: int = 100
    max_iterations: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    scheme: str = "uniform-qam"
    channel: str = "awgn"
    m: int = 6
    snr_grid: Tuple[float, ...] = (10.0,)
    samples_per_point: int = 100000
    seed: int = 2024
    checkpoint: Optional[str] = None
    workers: int = 1
    rbf_block_length: int = 1
    ber: BerSettings = BerSettings()
    demapper: str = "auto"
    demapper_settings: Dict[str, Any] = field(default_factory=dict)
    hidden_units: int = 64

    def __post_init__(self):
        problems = []
        if not self.snr_grid:
            problems.append("SNR grid must not be empty")
        elif any(b <= a for a, b in zip(self.snr_grid, self.snr_grid[1:])):
            problems.append("SNR grid must be strictly increasing")
        if self.samples_per_point < 1:
            problems.append("samples per point must be >= 1")
        if problems:
            raise ConfigError("invalid experiment settings", problems)

    @classmethod
    def from_config(cls, config: Config) -> "ExperimentConfig":
        config.validate_config()
        checkpoint = config.get("experiment.checkpoint")
        return cls(
            scheme=config.get("system.scheme"),
            channel=config.get("system.channel"),
            m=config.get("system.m"),
            snr_grid=tuple(config.snr_grid()),
            samples_per_point=config.get("experiment.samples_per_point"),
            seed=config.get("experiment.seed"),
            checkpoint=None if checkpoint is None else str(checkpoint),
            workers=config.get("experiment.workers"),
            rbf_block_length=config.get("experiment.rbf_block_length"),
            ber=BerSettings(**{**config.get("experiment.ber"),
                               "code_rate": str(config.get("experiment.ber.code_rate"))}),
            demapper=config.get("training.demapper"),
            demapper_settings=dict(config.get("demapper")),
            hidden_units=config.get("training.hidden_units"),
        )


# Test configuration
if __name__ == "__main__":
    config = Config()

    print("Configuration loaded successfully!")
    print(f"Scheme: {config.get('system.scheme')} on {config.get('system.channel')} (m={config.get('system.m')})")
    print(f"Training SNR range: {config.snr_range()}")

    # Validate configuration
    config.validate_config()

    # Create directories
    config.create_directories()
