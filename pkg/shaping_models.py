"""
Shaping Models Module
SNR-conditioned transmitters: joint probabilistic and geometric shaping
(PS-GS), Maxwell-Boltzmann shaped QAM with a learned temperature (MB-QAM),
geometric shaping only (GS), and the fixed uniform QAM baseline.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List

import numpy as np
from scipy.special import softmax

from constellation import (ConstellationNodes, ShapedConstellation, ShapingDistribution, check_split,
                           normalize_nodes, point_weight_node, qam_constellation, quadrant_points)
from config import SCHEMES
from errors import ConfigError, ShapeMismatchError
from grad_engine import CompGraph, ParamVector, dense, init_dense

logger = logging.getLogger(__name__)

SNR_FEATURE_SCALE = 20.0
POINT_HEAD_SCALE = 0.01


@dataclass(frozen=True)
class TransmitterOutput:
    """Numeric forward pass for a batch of SNRs"""
    m: int
    k: int
    snr_db: np.ndarray
    probs: np.ndarray
    points: np.ndarray

    def constellation(self, index: int = 0) -> ShapedConstellation:
        probs = self.probs[index] / np.sum(self.probs[index])
        return ShapedConstellation(self.m, self.k, self.points[index], ShapingDistribution(probs))


def snr_feature(graph: CompGraph, snr_db) -> int:
    snr_db = np.atleast_1d(np.asarray(snr_db, dtype=np.float64))
    return graph.constant(snr_db[:, None] / SNR_FEATURE_SCALE)


class TransmitterModel:
    """Shared plumbing; subclasses define the parameters and the tape forward pass"""

    kind = "base"
    trainable = True

    def __init__(self, m: int, k: int, hidden_units: int = 64):
        check_split(m, k)
        self.m = m
        self.k = k
        self.hidden_units = hidden_units

    @property
    def rate(self) -> Fraction:
        return Fraction(self.k, self.m)

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        return ParamVector.empty()

    def forward(self, graph: CompGraph, snr_db, nodes: Dict[str, int]) -> ConstellationNodes:
        raise NotImplementedError

    def check_params(self, params: ParamVector):
        expected = self.init_params(np.random.default_rng(0))
        if expected.names != params.names:
            raise ShapeMismatchError(f"{self.kind} parameter segments", (len(expected.names),),
                                     (len(params.names),))
        for segment in expected.segments:
            actual = params.segment(segment.name).shape
            if actual != segment.shape:
                raise ShapeMismatchError(f"{self.kind} segment '{segment.name}'", segment.shape, actual)

    def evaluate(self, snr_db, params: ParamVector) -> TransmitterOutput:
        self.check_params(params)
        snr_db = np.atleast_1d(np.asarray(snr_db, dtype=np.float64))
        graph = CompGraph()
        nodes = {name: graph.constant(params.segment(name)) for name in params.names}
        tx = self.forward(graph, snr_db, nodes)
        points = graph.value(tx.re) + 1j * graph.value(tx.im)
        return TransmitterOutput(self.m, self.k, snr_db, graph.value(tx.probs).copy(), points)

    def constellation_at(self, snr_db: float, params: ParamVector) -> ShapedConstellation:
        return self.evaluate([snr_db], params).constellation(0)

    def metadata(self) -> dict:
        return {"kind": self.kind, "m": self.m, "k": self.k, "hidden_units": self.hidden_units}

    # helpers shared by the network-based models

    def _trunk_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        arrays = {}
        arrays["trunk0/w"], arrays["trunk0/b"] = init_dense(rng, 1, self.hidden_units)
        arrays["trunk1/w"], arrays["trunk1/b"] = init_dense(rng, self.hidden_units, self.hidden_units)
        return arrays

    def _trunk(self, graph: CompGraph, snr_db, nodes: Dict[str, int]) -> int:
        x = snr_feature(graph, snr_db)
        x = dense(graph, x, nodes["trunk0/w"], nodes["trunk0/b"], "tanh")
        return dense(graph, x, nodes["trunk1/w"], nodes["trunk1/b"], "tanh")

    def _point_head_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        weight, _ = init_dense(rng, self.hidden_units, 2 ** (self.m + 1), scale=POINT_HEAD_SCALE)
        start = initial_geometry(self.m)
        bias = np.stack([start.real, start.imag], axis=-1).reshape(-1)
        return {"points/w": weight, "points/b": bias}

    def _point_head(self, graph: CompGraph, hidden: int, nodes: Dict[str, int]):
        raw = dense(graph, hidden, nodes["points/w"], nodes["points/b"])
        batch = graph.shape(raw)[0]
        pairs = graph.reshape(raw, (batch, 2 ** self.m, 2))
        return graph.take(pairs, 0, axis=-1), graph.take(pairs, 1, axis=-1)

    def _finish(self, graph: CompGraph, re: int, im: int, probs: int) -> ConstellationNodes:
        re, im = normalize_nodes(graph, re, im, probs, self.m, self.k)
        weights = point_weight_node(graph, probs, self.m, self.k)
        return ConstellationNodes(self.m, self.k, re, im, probs, weights)


def initial_geometry(m: int) -> np.ndarray:
    """Gray QAM for even m, a unit circle otherwise"""
    if m % 2 == 0:
        return qam_constellation(m).points
    return np.exp(2j * np.pi * np.arange(2 ** m) / 2 ** m)


class PSGSTransmitter(TransmitterModel):
    """Shared trunk with a softmax head for the shaping distribution and a point head"""

    kind = "psgs"

    def __init__(self, m: int, k: int, hidden_units: int = 64):
        if k >= m:
            raise ConfigError(f"psgs needs 1 <= k <= m-1, got k={k}, m={m}")
        super().__init__(m, k, hidden_units)

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        arrays = self._trunk_params(rng)
        arrays["probs/w"], arrays["probs/b"] = init_dense(rng, self.hidden_units, 2 ** self.k)
        arrays.update(self._point_head_params(rng))
        return ParamVector.from_arrays(arrays)

    def forward(self, graph: CompGraph, snr_db, nodes: Dict[str, int]) -> ConstellationNodes:
        hidden = self._trunk(graph, snr_db, nodes)
        probs = graph.softmax(dense(graph, hidden, nodes["probs/w"], nodes["probs/b"]))
        re, im = self._point_head(graph, hidden, nodes)
        return self._finish(graph, re, im, probs)


class GSTransmitter(TransmitterModel):
    """Learned geometry with uniform probabilities; one sub-constellation"""

    kind = "gs"

    def __init__(self, m: int, hidden_units: int = 64):
        super().__init__(m, m, hidden_units)

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        arrays = self._trunk_params(rng)
        arrays.update(self._point_head_params(rng))
        return ParamVector.from_arrays(arrays)

    def forward(self, graph: CompGraph, snr_db, nodes: Dict[str, int]) -> ConstellationNodes:
        hidden = self._trunk(graph, snr_db, nodes)
        re, im = self._point_head(graph, hidden, nodes)
        batch = graph.shape(re)[0]
        probs = graph.constant(np.full((batch, 2 ** self.m), 2.0 ** -self.m))
        return self._finish(graph, re, im, probs)


def mb_distribution(mu: float, points: np.ndarray) -> ShapingDistribution:
    """p(x) proportional to exp(-mu |x|^2) over the given points"""
    if mu < 0:
        raise ValueError(f"Maxwell-Boltzmann parameter must be non-negative, got {mu}")
    return ShapingDistribution(softmax(-mu * np.abs(np.asarray(points)) ** 2))


class MBQAMTransmitter(TransmitterModel):
    """
    Fixed Gray QAM whose quadrant points follow a Maxwell-Boltzmann law.

    A small network maps the SNR to mu >= 0 through a softplus output; all
    four quadrants share the same distribution, so the sign bits stay uniform.
    """

    kind = "mbqam"

    def __init__(self, m: int, hidden_units: int = 64):
        if m < 4 or m % 2:
            raise ConfigError(f"mbqam needs an even m >= 4, got {m}")
        super().__init__(m, m - 2, hidden_units)
        self.geometry = qam_constellation(m).points
        self.energies = np.abs(quadrant_points(m)) ** 2

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        arrays = self._trunk_params(rng)
        arrays["mu/w"], arrays["mu/b"] = init_dense(rng, self.hidden_units, 1)
        return ParamVector.from_arrays(arrays)

    def mu_node(self, graph: CompGraph, snr_db, nodes: Dict[str, int]) -> int:
        hidden = self._trunk(graph, snr_db, nodes)
        return dense(graph, hidden, nodes["mu/w"], nodes["mu/b"], "softplus")

    def forward(self, graph: CompGraph, snr_db, nodes: Dict[str, int]) -> ConstellationNodes:
        mu = self.mu_node(graph, snr_db, nodes)
        batch = graph.shape(mu)[0]
        shape = (batch, 2 ** self.k)
        energies = graph.constant(np.broadcast_to(self.energies, shape))
        probs = graph.softmax(graph.neg(graph.mul(graph.broadcast(mu, shape), energies)))
        points = (batch, 2 ** self.m)
        re = graph.constant(np.broadcast_to(self.geometry.real, points))
        im = graph.constant(np.broadcast_to(self.geometry.imag, points))
        return self._finish(graph, re, im, probs)

    def mu(self, snr_db, params: ParamVector) -> np.ndarray:
        self.check_params(params)
        graph = CompGraph()
        nodes = {name: graph.constant(params.segment(name)) for name in params.names}
        return graph.value(self.mu_node(graph, snr_db, nodes))[:, 0].copy()


class UniformQAMTransmitter(TransmitterModel):
    kind = "uniform-qam"
    trainable = False

    def __init__(self, m: int):
        reference = qam_constellation(m)
        super().__init__(m, reference.k, 0)
        self.geometry = reference.points

    def forward(self, graph: CompGraph, snr_db, nodes: Dict[str, int]) -> ConstellationNodes:
        batch = np.atleast_1d(snr_db).size
        points = (batch, 2 ** self.m)
        re = graph.constant(np.broadcast_to(self.geometry.real, points))
        im = graph.constant(np.broadcast_to(self.geometry.imag, points))
        probs = graph.constant(np.full((batch, 2 ** self.k), 2.0 ** -self.k))
        return self._finish(graph, re, im, probs)


def scheme_split(scheme: str, m: int) -> int:
    """Shaped bits per channel use for a scheme name"""
    if scheme.startswith("psgs-"):
        rate = Fraction(scheme.split("-", 1)[1])
        k = rate * m
        if k.denominator != 1:
            raise ConfigError(f"{scheme} needs m*r to be an integer, got m={m}")
        return int(k)
    if scheme == "gs":
        return m
    if scheme in ("mbqam-2/3", "uniform-qam"):
        return m - 2 if m > 2 else m
    raise ConfigError(f"unknown scheme '{scheme}', expected one of {SCHEMES}")


def build_transmitter(scheme: str, m: int, hidden_units: int = 64) -> TransmitterModel:
    k = scheme_split(scheme, m)
    if scheme.startswith("psgs-"):
        return PSGSTransmitter(m, k, hidden_units)
    if scheme == "gs":
        return GSTransmitter(m, hidden_units)
    if scheme == "mbqam-2/3":
        return MBQAMTransmitter(m, hidden_units)
    return UniformQAMTransmitter(m)


def mu_is_non_increasing(mu_values: List[float], tolerance: float = 1e-6) -> bool:
    return bool(np.all(np.diff(np.asarray(mu_values)) <= tolerance))
