"""
Channels Module
AWGN and Rayleigh block fading with a unit pilot, scalar LMMSE channel
estimation and equalization.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from grad_engine import CompGraph

logger = logging.getLogger(__name__)

CHANNEL_KINDS = ("awgn", "rbf")
REGULARIZATION = 1e-12


def snr_to_n0(snr_db):
    """SNR is 1/N0 with unit symbol energy"""
    n0 = 10.0 ** (-np.asarray(snr_db, dtype=np.float64) / 10.0)
    return float(n0) if n0.ndim == 0 else n0


def complex_normal(rng: np.random.Generator, variance, size) -> np.ndarray:
    """CN(0, variance) draws; each real component has variance/2"""
    size = (size,) if np.isscalar(size) else tuple(size)
    scale = np.sqrt(np.asarray(variance, dtype=np.float64) / 2.0)
    draws = rng.standard_normal(size + (2,))
    return scale * (draws[..., 0] + 1j * draws[..., 1])


def _check_kind(kind: str):
    if kind not in CHANNEL_KINDS:
        raise ValueError(f"unknown channel '{kind}', expected one of {CHANNEL_KINDS}")


@dataclass(frozen=True)
class ChannelRealization:
    """All random state of one channel use block"""
    kind: str
    n0: float
    noise: np.ndarray
    fading: Optional[complex] = None
    pilot_noise: Optional[complex] = None

    @classmethod
    def draw(cls, rng: np.random.Generator, kind: str, n0: float, num_symbols: int) -> "ChannelRealization":
        _check_kind(kind)
        noise = complex_normal(rng, n0, num_symbols)
        if kind == "awgn":
            return cls(kind, float(n0), noise)
        fading = complex(complex_normal(rng, 1.0, 1)[0])
        pilot_noise = complex(complex_normal(rng, n0, 1)[0])
        return cls(kind, float(n0), noise, fading, pilot_noise)


@dataclass(frozen=True)
class ChannelBatch:
    """B realizations stacked along the leading axis; noise is (B, T)"""
    kind: str
    snr_db: np.ndarray
    n0: np.ndarray
    noise: np.ndarray
    fading: Optional[np.ndarray] = None
    pilot_noise: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.snr_db.size

    def __getitem__(self, index: int) -> ChannelRealization:
        if self.kind == "awgn":
            return ChannelRealization(self.kind, float(self.n0[index]), self.noise[index])
        return ChannelRealization(self.kind, float(self.n0[index]), self.noise[index],
                                  complex(self.fading[index]), complex(self.pilot_noise[index]))

    @classmethod
    def draw(cls, rng: np.random.Generator, kind: str, snr_db, num_symbols: int) -> "ChannelBatch":
        """One realization per lane, each from its own stream spawned off rng"""
        _check_kind(kind)
        snr_db = np.atleast_1d(np.asarray(snr_db, dtype=np.float64))
        n0 = np.atleast_1d(snr_to_n0(snr_db))
        lanes = rng.spawn(snr_db.size)
        return cls.stack([ChannelRealization.draw(lane, kind, lane_n0, num_symbols)
                          for lane, lane_n0 in zip(lanes, n0)], snr_db)

    @classmethod
    def from_stream(cls, rng: np.random.Generator, kind: str, n0, num_blocks: int,
                    block_length: int) -> "ChannelBatch":
        """num_blocks realizations drawn in bulk from a single stream"""
        _check_kind(kind)
        n0 = np.broadcast_to(np.asarray(n0, dtype=np.float64), (num_blocks,))
        with np.errstate(divide="ignore"):
            snr_db = -10.0 * np.log10(n0)
        noise = complex_normal(rng, n0[:, None], (num_blocks, block_length))
        if kind == "awgn":
            return cls(kind, snr_db, n0, noise)
        fading = complex_normal(rng, 1.0, num_blocks)
        pilot_noise = complex_normal(rng, n0, num_blocks)
        return cls(kind, snr_db, n0, noise, fading, pilot_noise)

    @classmethod
    def stack(cls, realizations, snr_db) -> "ChannelBatch":
        realizations = list(realizations)
        kind = realizations[0].kind
        n0 = np.array([r.n0 for r in realizations])
        noise = np.stack([r.noise for r in realizations])
        if kind == "awgn":
            return cls(kind, np.asarray(snr_db, dtype=np.float64), n0, noise)
        return cls(kind, np.asarray(snr_db, dtype=np.float64), n0, noise,
                   np.array([r.fading for r in realizations]),
                   np.array([r.pilot_noise for r in realizations]))

    def estimates(self) -> np.ndarray:
        """(B,) LMMSE estimates from the pilots"""
        if self.kind == "awgn":
            return np.ones(len(self), dtype=np.complex128)
        return lmmse_estimate(self.fading + self.pilot_noise, self.n0)


def _per_block(values, x: np.ndarray) -> np.ndarray:
    """Block-level values shaped to broadcast against the symbols of each block"""
    values = np.asarray(values)
    return values.reshape(values.shape + (1,) * (x.ndim - values.ndim))


def awgn_apply(x: np.ndarray, realization) -> np.ndarray:
    """x + noise for a ChannelRealization or, row by row, a ChannelBatch"""
    if realization.kind != "awgn":
        raise ValueError(f"awgn_apply got a '{realization.kind}' realization")
    x = np.asarray(x)
    if x.shape != realization.noise.shape:
        raise ValueError(f"{x.size} symbols but {realization.noise.size} noise draws")
    return x + realization.noise


def rbf_apply(x: np.ndarray, realization) -> Tuple[np.ndarray, np.ndarray]:
    if realization.kind != "rbf":
        raise ValueError(f"rbf_apply got a '{realization.kind}' realization")
    x = np.asarray(x)
    if x.shape != realization.noise.shape:
        raise ValueError(f"{x.size} symbols but {realization.noise.size} noise draws")
    y = _per_block(realization.fading, x) * x + realization.noise
    y_pilot = realization.fading + realization.pilot_noise
    return y, y_pilot


def lmmse_estimate(y_pilot, n0):
    """Scalar LMMSE for h ~ CN(0, 1) observed through a unit pilot"""
    return np.asarray(y_pilot) / (1.0 + np.asarray(n0))


def equalize(y, h_hat, diagnostics: Optional[Counter] = None):
    y, h_hat = np.asarray(y), np.asarray(h_hat)
    power = np.abs(h_hat) ** 2
    weak = power < REGULARIZATION
    if np.any(weak):
        count = int(np.count_nonzero(np.broadcast_to(weak, np.broadcast(y, h_hat).shape)))
        if diagnostics is not None:
            diagnostics["regularized_equalizations"] += count
        logger.debug(f"Regularized {count} equalizations with |h_hat|^2 < {REGULARIZATION:g}")
        power = np.where(weak, power + REGULARIZATION, power)
    return y * np.conj(h_hat) / power


def transmit(x: np.ndarray, kind: str, n0, rng: np.random.Generator, block_length: int = 1,
             diagnostics: Optional[Counter] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Send a stream of symbols and return (equalized symbols, channel estimates).

    Under rbf one fade and one pilot cover each block of `block_length`
    consecutive symbols.
    """
    _check_kind(kind)
    x = np.asarray(x, dtype=np.complex128).reshape(-1)
    if kind == "awgn":
        batch = ChannelBatch.from_stream(rng, kind, n0, 1, x.size)
        return awgn_apply(x[None, :], batch)[0], np.ones_like(x)

    num_blocks = -(-x.size // block_length)
    blocks = np.zeros(num_blocks * block_length, dtype=np.complex128)
    blocks[:x.size] = x
    blocks = blocks.reshape(num_blocks, block_length)

    batch = ChannelBatch.from_stream(rng, kind, n0, num_blocks, block_length)
    y, y_pilot = rbf_apply(blocks, batch)
    h_hat = np.broadcast_to(lmmse_estimate(y_pilot, batch.n0)[:, None], blocks.shape)
    y_hat = equalize(y, h_hat, diagnostics)
    return y_hat.reshape(-1)[:x.size], h_hat.reshape(-1)[:x.size]


def channel_nodes(graph: CompGraph, x_re: int, x_im: int, batch: ChannelBatch,
                  diagnostics: Optional[Counter] = None) -> Tuple[int, int, np.ndarray]:
    """
    Pass (B, T) symbol nodes through the batch channel on the tape.

    Returns the equalized real and imaginary nodes plus the (B,) channel
    estimates. Fading and noise are constants, so the received symbol is an
    affine function of x: y_hat = a x + e with a = h conj(h_hat)/|h_hat|^2.
    """
    shape = graph.shape(x_re)
    h_hat = batch.estimates()
    if batch.kind == "awgn":
        gain = np.ones(len(batch), dtype=np.complex128)
        offset = batch.noise
    else:
        inverse = equalize(np.ones_like(h_hat), h_hat, diagnostics)
        gain = batch.fading * inverse
        offset = batch.noise * inverse[:, None]

    offset_re = graph.constant(np.broadcast_to(offset.real, shape))
    offset_im = graph.constant(np.broadcast_to(offset.imag, shape))
    if batch.kind == "awgn":
        return graph.add(x_re, offset_re), graph.add(x_im, offset_im), h_hat

    a_re = graph.constant(np.broadcast_to(gain.real[:, None], shape))
    a_im = graph.constant(np.broadcast_to(gain.imag[:, None], shape))
    y_re = graph.add(graph.sub(graph.mul(a_re, x_re), graph.mul(a_im, x_im)), offset_re)
    y_im = graph.add(graph.add(graph.mul(a_re, x_im), graph.mul(a_im, x_re)), offset_im)
    return y_re, y_im, h_hat
