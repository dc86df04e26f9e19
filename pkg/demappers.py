"""
Demappers Module
Bitwise soft demappers: the exact prior-aware AWGN posterior and a trainable
dense-network demapper for estimated-channel reception.

LLR convention everywhere: llr = ln p(b=1|y) - ln p(b=0|y).
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from channels import snr_to_n0
from constellation import ConstellationNodes, PointDistribution, ShapedConstellation, label_table
from errors import ConfigError, ShapeMismatchError
from grad_engine import CompGraph, ParamVector, dense, init_dense

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-30
EVAL_CHUNK = 4096
SNR_FEATURE_SCALE = 20.0


@dataclass(frozen=True)
class BitPosteriors:
    """Per symbol and bit: p(b=0|y), p(b=1|y) and the LLR, each (N, m)"""
    p0: np.ndarray
    p1: np.ndarray
    llr: np.ndarray

    @classmethod
    def from_llr(cls, llr: np.ndarray) -> "BitPosteriors":
        llr = np.asarray(llr, dtype=np.float64)
        return cls(expit(-llr), expit(llr), llr)

    def log_prob(self, bits: np.ndarray) -> np.ndarray:
        """ln p(b = bits | y) without forming the probabilities"""
        sign = 2.0 * np.asarray(bits, dtype=np.float64) - 1.0
        return -np.logaddexp(0.0, -sign * self.llr)


@dataclass(frozen=True)
class Observation:
    """Equalized received symbols on the tape, (B, T), plus per-example side information"""
    y_re: int
    y_im: int
    h_hat: np.ndarray
    snr_db: np.ndarray
    n0: np.ndarray
    channel: str = "awgn"


def _grid(graph: CompGraph, node: int, shape, axis: int) -> int:
    """Expand a (B, L) node to (B, T, P) along the given axis"""
    batch, length = graph.shape(node)
    local = (batch, length, 1) if axis == 1 else (batch, 1, length)
    return graph.broadcast(graph.reshape(node, local), shape)


def bit_masks(m: int) -> np.ndarray:
    """masks[i, s, t] is True when points s and t agree on bit i"""
    labels = label_table(m)
    return labels.T[:, :, None] == labels.T[:, None, :]


class ExactDemapper:
    """True posterior under AWGN; uses the transmitter's geometry and priors"""

    kind = "exact"
    trainable = False

    def __init__(self, m: int):
        self.m = m
        self._masks = bit_masks(m)

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        return ParamVector.empty()

    def log_probs(self, graph: CompGraph, observation: Observation, tx: ConstellationNodes,
                  nodes: Optional[Dict[str, int]] = None) -> int:
        """
        ln p(b_i = label_i(s) | y_s) for every example, transmitted point s and
        bit i, as a (B, T, m) node; T = 2^m received symbols per example.
        """
        if observation.channel != "awgn":
            raise ConfigError("the exact demapper assumes perfect channel knowledge and needs channel 'awgn'")
        batch, received = graph.shape(observation.y_re)
        points = 2 ** self.m
        shape = (batch, received, points)

        d_re = graph.sub(_grid(graph, observation.y_re, shape, 1), _grid(graph, tx.re, shape, 2))
        d_im = graph.sub(_grid(graph, observation.y_im, shape, 1), _grid(graph, tx.im, shape, 2))
        distance = graph.add(graph.square(d_re), graph.square(d_im))
        inv_n0 = np.broadcast_to((1.0 / observation.n0)[:, None, None], shape)
        log_prior = _grid(graph, graph.log(graph.clamp_min(tx.weights, LOG_FLOOR)), shape, 2)
        logits = graph.sub(log_prior, graph.mul(distance, graph.constant(inv_n0)))

        total = graph.logsumexp(logits)
        per_bit = [graph.sub(graph.logsumexp(logits, mask=self._masks[i][None]), total)
                   for i in range(self.m)]
        return graph.stack(per_bit, axis=-1)

    def posteriors(self, y_hat: np.ndarray, h_hat: np.ndarray, snr_db, c: ShapedConstellation,
                   params: Optional[ParamVector] = None) -> BitPosteriors:
        return exact_awgn_demap(y_hat, c, c.point_distribution, snr_to_n0(snr_db))


def point_log_posteriors(y: np.ndarray, c: ShapedConstellation, pd: PointDistribution, n0) -> np.ndarray:
    """(N, 2^m) ln p(x_t | y), one max-subtraction over all points"""
    y = np.asarray(y, dtype=np.complex128).reshape(-1, 1)
    n0 = np.asarray(n0, dtype=np.float64).reshape(-1, 1) if np.ndim(n0) else n0
    with np.errstate(divide="ignore"):
        log_prior = np.log(pd.probs)
    logits = log_prior[None, :] - np.abs(y - c.points[None, :]) ** 2 / n0
    return logits - logsumexp(logits, axis=1, keepdims=True)


def exact_awgn_demap(y: np.ndarray, c: ShapedConstellation, pd: PointDistribution, n0) -> BitPosteriors:
    y = np.asarray(y, dtype=np.complex128).reshape(-1)
    n0 = np.broadcast_to(np.asarray(n0, dtype=np.float64), y.shape)
    if pd.probs.size != c.points.size:
        raise ValueError(f"point distribution has {pd.probs.size} entries for {c.points.size} points")
    ones = c.labels.astype(bool)
    llr = np.empty((y.size, c.m))
    for start in range(0, y.size, EVAL_CHUNK):
        part = slice(start, start + EVAL_CHUNK)
        logits = point_log_posteriors(y[part], c, pd, n0[part])
        for i in range(c.m):
            lse_one = logsumexp(np.where(ones[:, i], logits, -np.inf), axis=1)
            lse_zero = logsumexp(np.where(~ones[:, i], logits, -np.inf), axis=1)
            llr[part, i] = lse_one - lse_zero
    return BitPosteriors.from_llr(llr)


def demapper_features(graph: CompGraph, observation: Observation) -> int:
    """[Re y, Im y, Re h, Im h, snr/20] stacked on the last axis, (B, T, 5)"""
    shape = graph.shape(observation.y_re)

    def side(values):
        return graph.constant(np.broadcast_to(np.asarray(values, dtype=np.float64)[:, None], shape))

    return graph.stack([
        observation.y_re,
        observation.y_im,
        side(observation.h_hat.real),
        side(observation.h_hat.imag),
        side(observation.snr_db / SNR_FEATURE_SCALE),
    ], axis=-1)


class NeuralDemapper:
    """Dense network from equalized symbol, channel estimate and SNR to m LLRs"""

    kind = "nn"
    trainable = True
    num_features = 5

    def __init__(self, m: int, hidden_units: int = 128, hidden_layers: int = 3, activation: str = "tanh"):
        self.m = m
        self.hidden_units = hidden_units
        self.hidden_layers = hidden_layers
        self.activation = activation
        self._signs = 2.0 * label_table(m).astype(np.float64) - 1.0

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.num_features,) + (self.hidden_units,) * self.hidden_layers + (self.m,)

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        arrays = {}
        sizes = self.layer_sizes
        for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            arrays[f"dense{layer}/w"], arrays[f"dense{layer}/b"] = init_dense(rng, fan_in, fan_out)
        return ParamVector.from_arrays(arrays)

    def check_params(self, params: ParamVector):
        expected = self.init_params(np.random.default_rng(0))
        for name, segment in zip(expected.names, expected.segments):
            if name not in params.names:
                raise ShapeMismatchError(f"demapper segment '{name}'", segment.shape, ())
            actual = params.segment(name).shape
            if actual != segment.shape:
                raise ShapeMismatchError(f"demapper segment '{name}'", segment.shape, actual)

    def llr_nodes(self, graph: CompGraph, observation: Observation, nodes: Dict[str, int]) -> int:
        x = demapper_features(graph, observation)
        last = len(self.layer_sizes) - 2
        for layer in range(last + 1):
            activation = "linear" if layer == last else self.activation
            x = dense(graph, x, nodes[f"dense{layer}/w"], nodes[f"dense{layer}/b"], activation)
        return x

    def log_probs(self, graph: CompGraph, observation: Observation, tx: Optional[ConstellationNodes],
                  nodes: Dict[str, int]) -> int:
        """ln sigmoid((2b - 1) llr) for the true label of each transmitted point, (B, T, m)"""
        llr = self.llr_nodes(graph, observation, nodes)
        shape = graph.shape(llr)
        if shape[1] != self._signs.shape[0]:
            raise ShapeMismatchError("label signs", shape, self._signs.shape)
        signs = graph.constant(np.broadcast_to(self._signs[None], shape))
        return graph.neg(graph.softplus(graph.neg(graph.mul(signs, llr))))

    def posteriors(self, y_hat: np.ndarray, h_hat: np.ndarray, snr_db, c: Optional[ShapedConstellation],
                   params: ParamVector) -> BitPosteriors:
        return nn_demap(y_hat, h_hat, snr_db, params, self)


def nn_demap(y_hat: np.ndarray, h_hat: np.ndarray, snr_db, params: ParamVector,
             demapper: NeuralDemapper) -> BitPosteriors:
    demapper.check_params(params)
    y_hat = np.asarray(y_hat, dtype=np.complex128).reshape(-1)
    h_hat = np.broadcast_to(np.asarray(h_hat, dtype=np.complex128), y_hat.shape)
    snr_db = np.broadcast_to(np.asarray(snr_db, dtype=np.float64), y_hat.shape)

    llr = np.empty((y_hat.size, demapper.m))
    for start in range(0, y_hat.size, EVAL_CHUNK):
        part = slice(start, start + EVAL_CHUNK)
        graph = CompGraph()
        nodes = {name: graph.constant(params.segment(name)) for name in params.names}
        # one symbol per example
        observation = Observation(
            graph.constant(y_hat[part].real[:, None]), graph.constant(y_hat[part].imag[:, None]),
            h_hat[part], snr_db[part], np.zeros(y_hat[part].size), "rbf",
        )
        llr[part] = graph.value(demapper.llr_nodes(graph, observation, nodes))[:, 0, :]
    return BitPosteriors.from_llr(llr)


def build_demapper(name: str, m: int, channel: str, settings: Optional[dict] = None):
    """'auto' picks the exact demapper on AWGN and the network otherwise"""
    settings = settings or {}
    if name == "auto":
        name = "exact" if channel == "awgn" else "nn"
    if name == "exact":
        if channel != "awgn":
            raise ConfigError("the exact demapper assumes perfect channel knowledge and needs channel 'awgn'")
        return ExactDemapper(m)
    if name == "nn":
        return NeuralDemapper(
            m,
            hidden_units=settings.get("hidden_units", 128),
            hidden_layers=settings.get("hidden_layers", 3),
            activation=settings.get("activation", "tanh"),
        )
    raise ConfigError(f"unknown demapper '{name}'")


def llr_reorder(llrs: np.ndarray, m: int, k: int, q: Optional[int] = None) -> np.ndarray:
    """Symbol-major (q, m) LLRs to codeword order [info bits | parity bits]"""
    llrs = np.asarray(llrs)
    q = llrs.size // m if q is None else q
    if llrs.size != q * m:
        raise ValueError(f"{llrs.size} LLRs do not fill {q} symbols of {m} bits")
    llrs = llrs.reshape(q, m)
    return np.concatenate([llrs[:, m - k:].reshape(-1), llrs[:, :m - k].reshape(-1)])


def llr_reorder_inverse(codeword_llrs: np.ndarray, m: int, k: int) -> np.ndarray:
    codeword_llrs = np.asarray(codeword_llrs)
    if codeword_llrs.size % m:
        raise ValueError(f"{codeword_llrs.size} values are not a whole number of {m}-bit symbols")
    q = codeword_llrs.size // m
    info = codeword_llrs[:q * k].reshape(q, k)
    parity = codeword_llrs[q * k:].reshape(q, m - k)
    return np.concatenate([parity, info], axis=1)
