#!/usr/bin/env python3
"""
Constellation Shaping Experiments
Trains SNR-conditioned shaping transmitters and evaluates them (BMI, SE, coded BER)
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import Config, ExperimentConfig, TrainConfig
from constellation import export_constellation
from errors import NumericalFailure, ShapingError
from evaluation import (capacity_curve, estimate_bmi, load_scheme, run_ber, se_curve, write_manifest,
                        write_series)
from training import train

logger = logging.getLogger(__name__)

VERBS = ("train", "eval-bmi", "eval-se", "eval-ber", "export-constellation")


def setup_logging(config: Config):
    log_dir = Path(config.get("directories.logs", "logs"))
    log_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, str(config.get("logging.level", "INFO")).upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_dir / config.get("logging.file", "shaping.log")),
            logging.StreamHandler(sys.stdout)
        ],
        force=True,
    )


class ShapingExperiments:
    def __init__(self, config: Config):
        self.config = config
        self.config.validate_config()
        self.config.create_directories()
        self.results_dir = Path(self.config.get("directories.results"))
        self.checkpoint_dir = Path(self.config.get("directories.checkpoints"))

    def _stem(self) -> str:
        scheme = self.config.get("system.scheme").replace("/", "")
        return f"{scheme}_{self.config.get('system.channel')}"

    def train(self) -> bool:
        settings = TrainConfig.from_config(self.config)
        logger.info("=== Starting training ===")
        result = train(settings, checkpoint_dir=self.checkpoint_dir)
        if result.best_seed is None:
            raise NumericalFailure(f"training failed for every seed in {list(settings.seeds)}")
        self.config.save_config(self.checkpoint_dir / f"{self._stem()}_config.yaml")
        logger.info("=== Training completed ===")
        return True

    def eval_bmi(self) -> bool:
        settings = ExperimentConfig.from_config(self.config)
        logger.info("=== Starting BMI evaluation ===")
        models = load_scheme(settings, self.checkpoint_dir)
        points = estimate_bmi(settings, models)

        write_series(self.results_dir / f"{self._stem()}_bmi.csv",
                     [(p.snr_db, p.bmi, p.stderr) for p in points])
        if settings.channel == "awgn":
            capacity = capacity_curve(settings.snr_grid)
            write_series(self.results_dir / "capacity_awgn.csv",
                         [(snr, value, None) for snr, value in zip(settings.snr_grid, capacity)])
        write_manifest(self.results_dir / f"{self._stem()}_bmi_manifest.json", self.config.settings,
                       settings.seed, models.checkpoint,
                       {"bit_entropies": {f"{p.snr_db:g}": p.bit_entropies for p in points},
                        "source_entropy": {f"{p.snr_db:g}": p.entropy for p in points}})
        logger.info("=== BMI evaluation completed ===")
        return True

    def eval_se(self) -> bool:
        settings = ExperimentConfig.from_config(self.config)
        models = load_scheme(settings, self.checkpoint_dir)
        rows = se_curve(settings, models)
        write_series(self.results_dir / f"{self._stem()}_se.csv", [(snr, se, None) for snr, se, _ in rows])
        write_series(self.results_dir / f"{self._stem()}_entropy.csv", [(snr, h, None) for snr, _, h in rows])
        write_manifest(self.results_dir / f"{self._stem()}_se_manifest.json", self.config.settings,
                       settings.seed, models.checkpoint)
        return True

    def eval_ber(self) -> bool:
        settings = ExperimentConfig.from_config(self.config)
        logger.info("=== Starting BER evaluation ===")
        models = load_scheme(settings, self.checkpoint_dir)
        points = run_ber(settings, models)
        write_series(self.results_dir / f"{self._stem()}_ber.csv", [(p.snr_db, p.ber, p.stderr) for p in points])
        write_manifest(self.results_dir / f"{self._stem()}_ber_manifest.json", self.config.settings,
                       settings.seed, models.checkpoint,
                       {"codewords": {f"{p.snr_db:g}": p.codewords for p in points},
                        "unconverged": {f"{p.snr_db:g}": p.unconverged for p in points}})
        logger.info("=== BER evaluation completed ===")
        return True

    def export_constellations(self, snrs: List[float]) -> bool:
        settings = ExperimentConfig.from_config(self.config)
        models = load_scheme(settings, self.checkpoint_dir)
        for snr_db in snrs or list(settings.snr_grid):
            path = self.results_dir / "constellations" / f"{self._stem()}_{snr_db:g}dB.csv"
            export_constellation(models.constellation_at(snr_db), path, snr_db)
        return True


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Constellation shaping experiments")
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", help="YAML config file (defaults are used when omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. training.iterations=500")
    parser.add_argument("--scheme", help="shortcut for system.scheme")
    parser.add_argument("--channel", help="shortcut for system.channel")
    parser.add_argument("--seed", type=int, help="experiment seed (training uses training.seeds)")
    parser.add_argument("--checkpoint", help="parameter file to evaluate")
    parser.add_argument("--snr", type=float, action="append", default=[],
                        help="SNR in dB for export-constellation; repeatable")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main function; returns the process exit code"""
    args = build_parser().parse_args(argv)
    try:
        config = Config(args.config)
        config.apply_overrides(args.overrides)
        if args.scheme:
            config.set("system.scheme", args.scheme)
        if args.channel:
            config.set("system.channel", args.channel)
        if args.seed is not None:
            config.set("experiment.seed", args.seed)
        if args.checkpoint:
            config.set("experiment.checkpoint", args.checkpoint)
        setup_logging(config)

        experiments = ShapingExperiments(config)
        if args.verb == "train":
            ok = experiments.train()
        elif args.verb == "eval-bmi":
            ok = experiments.eval_bmi()
        elif args.verb == "eval-se":
            ok = experiments.eval_se()
        elif args.verb == "eval-ber":
            ok = experiments.eval_ber()
        else:
            ok = experiments.export_constellations(args.snr)
        return 0 if ok else 1

    except ShapingError as e:
        logger.error(f"{args.verb} failed: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Error in {args.verb}: {str(e)}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
