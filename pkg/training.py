"""
Training Module
Entropy-corrected cross-entropy loss estimated by enumerating the whole
constellation through sampled channel states, the Adam optimizer, and the
best-of-seeds training loop with validation and early stopping.
"""

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from channels import ChannelBatch, channel_nodes
from config import TrainConfig
from constellation import ConstellationNodes, source_entropy_node
from demappers import Observation, build_demapper
from errors import CheckpointMissingError, DegenerateConstellationError, NumericalFailure
from grad_engine import CompGraph, ParamVector
from shaping_models import MBQAMTransmitter, TransmitterModel, build_transmitter, mu_is_non_increasing

logger = logging.getLogger(__name__)

LOG_PROB_FLOOR = np.log(1e-30)
VALIDATION_CHUNK = 500
VALIDATION_POINTS = 21


def split_nodes(bindings: Dict[str, int], prefix: str) -> Dict[str, int]:
    head = prefix + "/"
    return {name[len(head):]: node for name, node in bindings.items() if name.startswith(head)}


def loss_terms(graph: CompGraph, transmitter: TransmitterModel, demapper, batch: ChannelBatch,
               bindings: Dict[str, int], diagnostics: Optional[Counter] = None) -> Tuple[int, ConstellationNodes]:
    """
    Per-example loss in bits, a (B,) node:
        -( H(X) + sum_i sum_t w(t) log2 p(b_i = label_i(t) | y_t) )
    where every example sends all 2^m points through its own channel state
    and w is the joint point probability.
    """
    tx = transmitter.forward(graph, batch.snr_db, split_nodes(bindings, "tx"))
    y_re, y_im, h_hat = channel_nodes(graph, tx.re, tx.im, batch, diagnostics)
    observation = Observation(y_re, y_im, h_hat, batch.snr_db, batch.n0, batch.kind)

    log_probs = demapper.log_probs(graph, observation, tx, split_nodes(bindings, "demapper"))
    per_point = graph.sum(graph.clamp_min(log_probs, LOG_PROB_FLOOR), axis=-1)
    cross = graph.scale(graph.sum(graph.mul(per_point, tx.weights), axis=-1), 1.0 / np.log(2.0))
    entropy = source_entropy_node(graph, tx.probs, transmitter.m, transmitter.k)

    for term, node in (("entropy", entropy), ("cross-entropy", cross)):
        values = graph.value(node)
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise NumericalFailure("non-finite loss", snr_db=float(batch.snr_db[bad]), term=term)

    return graph.neg(graph.add(entropy, cross)), tx


def loss_estimate(graph: CompGraph, transmitter: TransmitterModel, demapper, batch: ChannelBatch,
                  bindings: Dict[str, int], diagnostics: Optional[Counter] = None) -> int:
    """Scalar batch mean of loss_terms"""
    terms, _ = loss_terms(graph, transmitter, demapper, batch, bindings, diagnostics)
    return graph.scale(graph.sum(terms), 1.0 / len(batch))


@dataclass
class AdamState:
    first: np.ndarray
    second: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> Tuple[np.ndarray, AdamState]:
    if params.shape != grads.shape:
        raise ValueError(f"parameter shape {params.shape} does not match gradient shape {grads.shape}")
    step = state.step + 1
    first = beta1 * state.first + (1.0 - beta1) * grads
    second = beta2 * state.second + (1.0 - beta2) * grads * grads
    corrected_first = first / (1.0 - beta1 ** step)
    corrected_second = second / (1.0 - beta2 ** step)
    updated = params - lr * corrected_first / (np.sqrt(corrected_second) + epsilon)
    return updated, AdamState(first, second, step)


class Adam:
    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.state = AdamState.zeros(size)

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        params, self.state = adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.epsilon)
        return params


@dataclass
class TrainHistory:
    seed: int
    losses: List[float] = field(default_factory=list)
    validation_iterations: List[int] = field(default_factory=list)
    validation_losses: List[float] = field(default_factory=list)
    best_validation: float = float("inf")
    best_iteration: int = 0
    failed: bool = False
    params: Optional[ParamVector] = None

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        validation = dict(zip(self.validation_iterations, self.validation_losses))
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "loss", "validation_loss"])
            for iteration, loss in enumerate(self.losses, start=1):
                value = validation.get(iteration)
                writer.writerow([iteration, f"{loss:.17g}", "" if value is None else f"{value:.17g}"])
        return path


@dataclass
class TrainResult:
    histories: Dict[int, TrainHistory]
    best_seed: Optional[int]
    transmitter: TransmitterModel
    demapper: object

    @property
    def best(self) -> Optional[TrainHistory]:
        return None if self.best_seed is None else self.histories[self.best_seed]


def build_models(config: TrainConfig):
    transmitter = build_transmitter(config.scheme, config.m, config.hidden_units)
    demapper = build_demapper(config.demapper, config.m, config.channel, config.demapper_settings)
    return transmitter, demapper


def initial_params(transmitter: TransmitterModel, demapper, rng: np.random.Generator) -> ParamVector:
    return ParamVector.merge({"tx": transmitter.init_params(rng), "demapper": demapper.init_params(rng)})


def validation_loss(transmitter: TransmitterModel, demapper, params: ParamVector, config: TrainConfig) -> float:
    """Mean loss over a fixed SNR grid and fixed channel draws"""
    grid = np.linspace(config.snr_range[0], config.snr_range[1], VALIDATION_POINTS)
    snr_db = np.repeat(grid, config.validation_realizations)
    rng = np.random.default_rng(config.validation_seed)
    total = 0.0
    for start in range(0, snr_db.size, VALIDATION_CHUNK):
        chunk = snr_db[start:start + VALIDATION_CHUNK]
        batch = ChannelBatch.draw(rng, config.channel, chunk, 2 ** transmitter.m)
        graph = CompGraph()
        terms, _ = loss_terms(graph, transmitter, demapper, batch, params.bind(graph, trainable=False))
        total += float(np.sum(graph.value(terms)))
    return total / snr_db.size


def train_seed(config: TrainConfig, seed: int, transmitter: TransmitterModel, demapper) -> TrainHistory:
    rng = np.random.default_rng(seed)
    params = initial_params(transmitter, demapper, rng)
    history = TrainHistory(seed=seed, params=params.copy())
    optimizer = Adam(len(params), config.learning_rate, config.beta1, config.beta2, config.epsilon)
    diagnostics = Counter()
    lo, hi = config.snr_range
    iterations = config.iterations if len(params) else 0

    try:
        for iteration in range(1, iterations + 1):
            snr_db = rng.uniform(lo, hi, config.batch_size)
            batch = ChannelBatch.draw(rng, config.channel, snr_db, 2 ** transmitter.m)
            graph = CompGraph()
            bindings = params.bind(graph)
            try:
                loss = loss_estimate(graph, transmitter, demapper, batch, bindings, diagnostics)
            except (NumericalFailure, DegenerateConstellationError) as e:
                raise NumericalFailure(str(e), iteration=iteration) from e
            value = float(graph.value(loss))
            history.losses.append(value)

            grads = params.gradient(graph.backward(loss), bindings)
            if not np.all(np.isfinite(grads)):
                raise NumericalFailure("non-finite gradient", iteration=iteration)
            params = params.with_values(optimizer.step(params.values, grads))

            if iteration % config.log_interval == 0:
                logger.info(f"Seed {seed} iteration {iteration}: loss {value:.5f} bits")

            if iteration % config.validation_interval == 0 or iteration == iterations:
                score = validation_loss(transmitter, demapper, params, config)
                history.validation_iterations.append(iteration)
                history.validation_losses.append(score)
                logger.info(f"Seed {seed} validation at {iteration}: loss {score:.5f} bits")
                if score < history.best_validation:
                    history.best_validation = score
                    history.best_iteration = iteration
                    history.params = params.copy()
                elif iteration - history.best_iteration >= config.patience:
                    logger.info(f"Seed {seed}: no improvement for {config.patience} iterations, stopping")
                    break
    except (NumericalFailure, DegenerateConstellationError) as e:
        logger.warning(f"Seed {seed} failed: {e}")
        history.failed = True
        return history

    if not history.validation_losses:
        history.best_validation = validation_loss(transmitter, demapper, history.params, config)

    if diagnostics["regularized_equalizations"]:
        logger.warning(f"Seed {seed}: {diagnostics['regularized_equalizations']} regularized equalizations")
    return history


def checkpoint_name(scheme: str, channel: str, seed: Optional[int] = None) -> str:
    slug = scheme.replace("/", "")
    return f"{slug}_{channel}_best" if seed is None else f"{slug}_{channel}_seed{seed}"


def checkpoint_metadata(config: TrainConfig, transmitter: TransmitterModel, demapper, history: TrainHistory) -> dict:
    metadata = {
        "scheme": config.scheme,
        "channel": config.channel,
        "seed": history.seed,
        "best_validation": history.best_validation,
        "best_iteration": history.best_iteration,
        "transmitter": transmitter.metadata(),
        "demapper": {"kind": demapper.kind},
    }
    if demapper.trainable:
        metadata["demapper"].update({
            "hidden_units": demapper.hidden_units,
            "hidden_layers": demapper.hidden_layers,
            "activation": demapper.activation,
        })
    return metadata


def train(config: TrainConfig, checkpoint_dir=None) -> TrainResult:
    """Train every seed, keep the one with the lowest validation loss"""
    transmitter, demapper = build_models(config)
    logger.info(f"=== Training {config.scheme} on {config.channel} (m={transmitter.m}, k={transmitter.k}) ===")

    histories = {}
    for seed in config.seeds:
        history = train_seed(config, seed, transmitter, demapper)
        histories[seed] = history
        if checkpoint_dir is not None and not history.failed:
            stem = Path(checkpoint_dir) / checkpoint_name(config.scheme, config.channel, seed)
            history.params.save(stem.with_suffix(".params"),
                                 checkpoint_metadata(config, transmitter, demapper, history))
            history.to_csv(stem.with_suffix(".csv"))

    candidates = [h for h in histories.values() if not h.failed]
    best_seed = min(candidates, key=lambda h: h.best_validation).seed if candidates else None
    if best_seed is None:
        logger.error("Every seed failed")
    else:
        best = histories[best_seed]
        logger.info(f"Best seed {best_seed}: validation loss {best.best_validation:.5f} bits")
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / (checkpoint_name(config.scheme, config.channel) + ".params")
            best.params.save(path, checkpoint_metadata(config, transmitter, demapper, best))
        if isinstance(transmitter, MBQAMTransmitter):
            log_mu_curve(transmitter, best.params.subset("tx"), config)

    return TrainResult(histories, best_seed, transmitter, demapper)


def log_mu_curve(transmitter: MBQAMTransmitter, params: ParamVector, config: TrainConfig):
    grid = np.linspace(config.snr_range[0], config.snr_range[1], VALIDATION_POINTS)
    mu = transmitter.mu(grid, params)
    shape = "non-increasing" if mu_is_non_increasing(mu) else "not monotone"
    logger.info(f"Learned mu over {grid[0]:g}..{grid[-1]:g} dB is {shape}: "
                + ", ".join(f"{value:.3f}" for value in mu))


def load_checkpoint(path) -> Tuple[ParamVector, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointMissingError(f"checkpoint not found: {path}")
    return ParamVector.load(path)
