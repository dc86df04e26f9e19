"""
Evaluation Module
Monte Carlo BMI estimation with ideally distribution-matched information
bits, spectral efficiency, the coded BER chain, the AWGN capacity curve,
and the CSV / manifest writers used by the command line.
"""

import csv
import hashlib
import json
import logging
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from channels import ChannelBatch, snr_to_n0, transmit
from config import ExperimentConfig
from constellation import ShapedConstellation, ShapingDistribution, int_to_bits, map_bits, source_entropy
from demappers import BitPosteriors, NeuralDemapper, build_demapper, llr_reorder
from errors import CheckpointMissingError, ConfigError
from fec import LdpcCode, bit_placement, get_code
from grad_engine import CompGraph, ParamVector
from shaping_models import TransmitterModel, build_transmitter
from training import checkpoint_name, load_checkpoint, loss_terms

logger = logging.getLogger(__name__)

SAMPLE_CHUNK = 20000


@dataclass
class SchemeModels:
    """A transmitter and demapper with the parameters they run with"""
    transmitter: TransmitterModel
    demapper: object
    tx_params: ParamVector
    demapper_params: ParamVector
    checkpoint: Optional[Path] = None

    @property
    def merged(self) -> ParamVector:
        return ParamVector.merge({"tx": self.tx_params, "demapper": self.demapper_params})

    def constellation_at(self, snr_db: float) -> ShapedConstellation:
        return self.transmitter.constellation_at(snr_db, self.tx_params)

    def posteriors(self, y_hat, h_hat, snr_db: float, c: ShapedConstellation) -> BitPosteriors:
        return self.demapper.posteriors(y_hat, h_hat, snr_db, c, self.demapper_params)


def load_scheme(config: ExperimentConfig, checkpoint_dir="checkpoints") -> SchemeModels:
    transmitter = build_transmitter(config.scheme, config.m, config.hidden_units)
    demapper = build_demapper(config.demapper, config.m, config.channel, config.demapper_settings)
    if not transmitter.trainable and not demapper.trainable:
        return SchemeModels(transmitter, demapper, ParamVector.empty(), ParamVector.empty())

    path = Path(config.checkpoint) if config.checkpoint else \
        Path(checkpoint_dir) / (checkpoint_name(config.scheme, config.channel) + ".params")
    if not path.exists():
        raise CheckpointMissingError(f"{config.scheme} on {config.channel} needs a trained checkpoint: {path}")
    params, metadata = load_checkpoint(path)

    stored = metadata.get("demapper", {})
    if stored.get("kind") == "nn":
        demapper = NeuralDemapper(config.m, stored.get("hidden_units", 128), stored.get("hidden_layers", 3),
                                  stored.get("activation", "tanh"))
    elif stored.get("kind") == "exact":
        demapper = build_demapper("exact", config.m, config.channel)
    stored_tx = metadata.get("transmitter", {})
    if stored_tx.get("hidden_units"):
        transmitter = build_transmitter(config.scheme, config.m, stored_tx["hidden_units"])

    models = SchemeModels(transmitter, demapper, params.subset("tx"), params.subset("demapper"), path)
    transmitter.check_params(models.tx_params)
    if demapper.trainable:
        demapper.check_params(models.demapper_params)
    logger.info(f"Loaded {config.scheme} checkpoint {path}")
    return models


def sample_indices(rng: np.random.Generator, shaping: ShapingDistribution, m: int, k: int,
                   size: int) -> np.ndarray:
    """Point indices with shaped info bits (inverse CDF) and uniform parity bits"""
    cdf = np.cumsum(shaping.probs)
    info = np.minimum(np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right"), 2 ** k - 1)
    parity = rng.integers(0, 2 ** (m - k), size)
    return parity * 2 ** k + info


@dataclass
class BmiPoint:
    snr_db: float
    bmi: float
    stderr: float
    entropy: float
    bit_entropies: List[float] = field(default_factory=list)


def bmi_at(models: SchemeModels, snr_db: float, samples: int, rng: np.random.Generator,
           channel: str = "awgn", block_length: int = 1, diagnostics: Optional[Counter] = None) -> BmiPoint:
    """[H(X) - sum_i H(B_i|Y)]^+ from sampled log-posteriors of the sent bits"""
    c = models.constellation_at(snr_db)
    n0 = snr_to_n0(snr_db)
    totals = np.empty(samples)
    bit_sums = np.zeros(c.m)
    for start in range(0, samples, SAMPLE_CHUNK):
        size = min(SAMPLE_CHUNK, samples - start)
        sent = sample_indices(rng, c.shaping, c.m, c.k, size)
        y_hat, h_hat = transmit(c.points[sent], channel, n0, rng, block_length, diagnostics)
        log2p = models.posteriors(y_hat, h_hat, snr_db, c).log_prob(c.labels[sent]) / np.log(2.0)
        totals[start:start + size] = log2p.sum(axis=1)
        bit_sums += log2p.sum(axis=0)

    entropy = source_entropy(c.shaping, c.m, c.k)
    stderr = float(np.std(totals, ddof=1) / np.sqrt(samples)) if samples > 1 else float("nan")
    return BmiPoint(float(snr_db), max(entropy + float(totals.mean()), 0.0), stderr, entropy,
                    list(-bit_sums / samples))


def map_grid(evaluate: Callable[[float, np.random.Generator], object], grid: Sequence[float],
             seed: int, workers: int = 1) -> List:
    """Evaluate every grid point on its own RNG stream; results keep grid order"""
    streams = np.random.SeedSequence(seed).spawn(len(grid))
    tasks = [(snr, np.random.default_rng(stream)) for snr, stream in zip(grid, streams)]
    if workers <= 1:
        return [evaluate(snr, rng) for snr, rng in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda task: evaluate(*task), tasks))


def estimate_bmi(config: ExperimentConfig, models: Optional[SchemeModels] = None,
                 checkpoint_dir="checkpoints") -> List[BmiPoint]:
    models = models or load_scheme(config, checkpoint_dir)
    diagnostics = Counter()
    lock = threading.Lock()

    def evaluate(snr_db, rng):
        counts = Counter()
        point = bmi_at(models, snr_db, config.samples_per_point, rng, config.channel,
                       config.rbf_block_length, counts)
        with lock:
            diagnostics.update(counts)
        logger.info(f"{config.scheme} {config.channel} {snr_db:g} dB: BMI {point.bmi:.4f} +- {point.stderr:.4f}")
        return point

    points = map_grid(evaluate, config.snr_grid, config.seed, config.workers)
    if diagnostics["regularized_equalizations"]:
        logger.warning(f"{diagnostics['regularized_equalizations']} equalizations were regularized")
    return points


def compute_se(shaping: ShapingDistribution, m: int, k: int, r: float) -> float:
    """Information bits per channel use, H(X) - m(1 - r)"""
    return source_entropy(shaping, m, k) - m * (1.0 - float(r))


def se_curve(config: ExperimentConfig, models: Optional[SchemeModels] = None,
             checkpoint_dir="checkpoints") -> List[Tuple[float, float, float]]:
    """(snr, SE, H(X)) over the grid at the code rate the scheme runs with"""
    models = models or load_scheme(config, checkpoint_dir)
    rate = scheme_rate(config, models.transmitter)
    rows = []
    for snr_db in config.snr_grid:
        c = models.constellation_at(snr_db)
        rows.append((snr_db, compute_se(c.shaping, c.m, c.k, rate), source_entropy(c.shaping, c.m, c.k)))
    return rows


def scheme_rate(config: ExperimentConfig, transmitter: TransmitterModel) -> float:
    """Shaped schemes fix the code rate to k/m; uniform ones use the configured rate"""
    if transmitter.k < transmitter.m and transmitter.kind != "uniform-qam":
        return float(transmitter.rate)
    numerator, denominator = config.ber.code_rate.split("/")
    return int(numerator) / int(denominator)


def capacity_curve(grid: Sequence[float]) -> np.ndarray:
    return np.log2(1.0 + 1.0 / snr_to_n0(np.asarray(grid, dtype=np.float64)))


@dataclass
class BerPoint:
    snr_db: float
    ber: float
    bits: int
    errors: int
    codewords: int
    unconverged: int

    @property
    def stderr(self) -> float:
        return float(np.sqrt(self.ber * (1.0 - self.ber) / self.bits)) if self.bits else float("nan")


def code_for(config: ExperimentConfig, transmitter: TransmitterModel) -> Tuple[LdpcCode, int]:
    """The LDPC code and info bits per symbol for a scheme"""
    rate = config.ber.code_rate
    if transmitter.kind in ("psgs", "mbqam"):
        rate = str(transmitter.rate)
    if rate not in ("1/2", "2/3"):
        raise ConfigError(f"{config.scheme} needs a rate {rate} code, which is not available")
    code = get_code(rate)
    if (code.k * transmitter.m) % code.n:
        raise ConfigError(f"rate {rate} does not give an integer number of info bits per {transmitter.m}-bit symbol")
    k = code.k * transmitter.m // code.n
    if transmitter.k not in (k, transmitter.m):
        raise ConfigError(f"{config.scheme} shapes {transmitter.k} bits per symbol but the code carries {k}")
    return code, k


def ber_at(models: SchemeModels, config: ExperimentConfig, snr_db: float,
           rng: np.random.Generator) -> BerPoint:
    """
    One SNR point of the coded chain: shaped info bits, systematic encoding,
    bit placement, mapping, channel, demapping, decoding, info-bit errors.
    """
    transmitter = models.transmitter
    code, k = code_for(config, transmitter)
    m = transmitter.m
    q = code.n // m
    c = models.constellation_at(snr_db)
    shaped = c.k == k and c.k < c.m
    n0 = snr_to_n0(snr_db)
    settings = config.ber

    errors = bits = codewords = unconverged = 0
    while codewords < settings.max_codewords:
        if codewords >= settings.min_codewords and errors >= settings.min_errors:
            break
        if shaped:
            info = int_to_bits(sample_indices(rng, c.shaping, k, k, q), k).reshape(-1)
        else:
            info = rng.integers(0, 2, code.k).astype(np.uint8)
        codeword = code.encode(info)
        b_info, b_parity = bit_placement(codeword[:code.k], codeword[code.k:], m, k)
        symbols = map_bits(b_info, b_parity, c)

        y_hat, h_hat = transmit(symbols, config.channel, n0, rng, config.rbf_block_length)
        llrs = models.posteriors(y_hat, h_hat, snr_db, c).llr
        decoded, converged = code.decode(llr_reorder(llrs, m, k, q), settings.max_iterations)

        errors += int(np.count_nonzero(decoded[:code.k] != info))
        bits += code.k
        codewords += 1
        unconverged += not converged

    return BerPoint(float(snr_db), errors / bits if bits else float("nan"), bits, errors, codewords, unconverged)


def run_ber(config: ExperimentConfig, models: Optional[SchemeModels] = None,
            checkpoint_dir="checkpoints") -> List[BerPoint]:
    models = models or load_scheme(config, checkpoint_dir)
    code_for(config, models.transmitter)

    def evaluate(snr_db, rng):
        point = ber_at(models, config, snr_db, rng)
        logger.info(f"{config.scheme} {config.channel} {snr_db:g} dB: BER {point.ber:.3e} "
                    f"({point.errors} errors, {point.codewords} codewords)")
        return point

    return map_grid(evaluate, config.snr_grid, config.seed, config.workers)


def enumerated_bmi(models: SchemeModels, snr_db: float, batches: int, batch_size: int,
                   rng: np.random.Generator, channel: str = "awgn") -> Tuple[float, float]:
    """Mean and standard error of -loss from the training estimator at one SNR"""
    values = []
    params = models.merged
    for _ in range(batches):
        batch = ChannelBatch.draw(rng, channel, np.full(batch_size, float(snr_db)), 2 ** models.transmitter.m)
        graph = CompGraph()
        terms, _ = loss_terms(graph, models.transmitter, models.demapper, batch, params.bind(graph, trainable=False))
        values.append(-graph.value(terms))
    values = np.concatenate(values)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def write_series(path, rows: Sequence[Tuple[float, float, float]]) -> Path:
    """CSV with columns es_n0_db, value, stderr"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["es_n0_db", "value", "stderr"])
        for snr_db, value, stderr in rows:
            writer.writerow([f"{snr_db:g}", f"{value:.17g}", "" if stderr is None else f"{stderr:.17g}"])
    logger.info(f"Wrote {path}")
    return path


def sha256_of_file(path) -> Optional[str]:
    if path is None or not Path(path).exists():
        return None
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(path, settings: dict, seed: int, checkpoint=None, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    resolved = yaml.safe_dump(settings, sort_keys=True).encode("utf-8")
    manifest = {
        "config_sha256": hashlib.sha256(resolved).hexdigest(),
        "seed": seed,
        "checkpoint": None if checkpoint is None else str(checkpoint),
        "checkpoint_sha256": sha256_of_file(checkpoint),
    }
    manifest.update(extra or {})
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path
