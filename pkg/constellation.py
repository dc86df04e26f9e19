"""
Constellation Module
Labeled constellations, sub-constellation partition, shaping distributions,
power normalization and source entropy.

Conventions used everywhere in the package:
  - bit vectors are read MSB-first;
  - the label of point t is the m-bit binary representation of t, laid out
    as [b_P (m-k parity bits) | b_I (k information bits)];
  - point t belongs to sub-constellation t // 2^k.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.special import entr

from errors import DegenerateConstellationError
from grad_engine import CompGraph

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-12
LOG_FLOOR = 1e-30


def int_to_bits(values, width: int) -> np.ndarray:
    """Integers to MSB-first bit arrays of shape (..., width)"""
    values = np.asarray(values, dtype=np.int64)
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    return ((values[..., None] >> shifts) & 1).astype(np.uint8)


def bits_to_int(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    width = bits.shape[-1]
    if width == 0:
        return np.zeros(bits.shape[:-1], dtype=np.int64)
    weights = 1 << np.arange(width - 1, -1, -1, dtype=np.int64)
    return bits @ weights


def label_table(m: int) -> np.ndarray:
    """(2^m, m) natural labels"""
    return int_to_bits(np.arange(2 ** m), m)


def check_split(m: int, k: int):
    if not 1 <= k <= m:
        raise ValueError(f"shaped bits k={k} out of range for m={m}")


@dataclass(frozen=True)
class ShapingDistribution:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        size = probs.size
        if probs.ndim != 1 or size == 0 or size & (size - 1):
            raise ValueError(f"shaping distribution needs 2^k entries, got shape {probs.shape}")
        if np.any(probs < 0):
            raise ValueError("shaping probabilities must be non-negative")
        if abs(probs.sum() - 1.0) > PROBABILITY_TOLERANCE:
            raise ValueError(f"shaping probabilities sum to {probs.sum():.15f}")

    @classmethod
    def uniform(cls, k: int) -> "ShapingDistribution":
        return cls(np.full(2 ** k, 2.0 ** -k))

    @property
    def k(self) -> int:
        return int(self.probs.size).bit_length() - 1


@dataclass(frozen=True)
class PointDistribution:
    probs: np.ndarray


@dataclass(frozen=True)
class ShapedConstellation:
    m: int
    k: int
    points: np.ndarray
    shaping: ShapingDistribution
    labels: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        check_split(self.m, self.k)
        points = np.asarray(self.points, dtype=np.complex128)
        if points.shape != (2 ** self.m,):
            raise ValueError(f"expected {2 ** self.m} points, got shape {points.shape}")
        if self.shaping.probs.size != 2 ** self.k:
            raise ValueError(f"shaping has {self.shaping.probs.size} entries, expected {2 ** self.k}")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", label_table(self.m))

    @property
    def num_subconstellations(self) -> int:
        return 2 ** (self.m - self.k)

    @property
    def point_distribution(self) -> PointDistribution:
        return point_probabilities(self.shaping, self.m, self.k)

    def subconstellation(self, j: int) -> np.ndarray:
        size = 2 ** self.k
        return self.points[j * size:(j + 1) * size]

    def subconstellation_powers(self) -> np.ndarray:
        power = np.abs(self.points.reshape(-1, 2 ** self.k)) ** 2
        return power @ self.shaping.probs


def point_probabilities(shaping: ShapingDistribution, m: int, k: int) -> PointDistribution:
    check_split(m, k)
    if shaping.probs.size != 2 ** k:
        raise ValueError(f"shaping has {shaping.probs.size} entries, expected {2 ** k}")
    return PointDistribution(np.tile(shaping.probs, 2 ** (m - k)) * 2.0 ** -(m - k))


# Graph versions; leading axis is the batch.

def normalize_nodes(graph: CompGraph, re: int, im: int, probs: int, m: int, k: int) -> Tuple[int, int]:
    """
    Scale every sub-constellation to unit power under the shaping weights.

    re, im: (B, 2^m) nodes; probs: (B, 2^k) node.
    """
    check_split(m, k)
    batch = graph.shape(re)[0]
    groups, size = 2 ** (m - k), 2 ** k
    grouped = (batch, groups, size)

    energy = graph.reshape(graph.add(graph.square(re), graph.square(im)), grouped)
    weights = graph.broadcast(graph.reshape(probs, (batch, 1, size)), grouped)
    power = graph.sum(graph.mul(energy, weights), axis=-1)

    power_value = graph.value(power)
    if not np.all(power_value > 0):
        bad = np.argwhere(~(power_value > 0))[0]
        raise DegenerateConstellationError(
            f"sub-constellation {int(bad[1])} has power {power_value[tuple(bad)]:.3g} under the shaping distribution"
        )

    scale = graph.reshape(graph.broadcast(graph.reshape(graph.sqrt(power), (batch, groups, 1)), grouped),
                          (batch, 2 ** m))
    return graph.div(re, scale), graph.div(im, scale)


@dataclass(frozen=True)
class ConstellationNodes:
    """Tape handles of a batch of normalized constellations"""
    m: int
    k: int
    re: int
    im: int
    probs: int
    weights: int


def point_weight_node(graph: CompGraph, probs: int, m: int, k: int) -> int:
    """Joint point probabilities (B, 2^m) from shaping probabilities (B, 2^k)"""
    batch = graph.shape(probs)[0]
    groups, size = 2 ** (m - k), 2 ** k
    tiled = graph.broadcast(graph.reshape(probs, (batch, 1, size)), (batch, groups, size))
    return graph.scale(graph.reshape(tiled, (batch, 2 ** m)), 2.0 ** -(m - k))


def source_entropy_node(graph: CompGraph, probs: int, m: int, k: int) -> int:
    """Entropy in bits per example, (B, 2^k) -> (B,)"""
    clamped = graph.clamp_min(probs, LOG_FLOOR)
    plogp = graph.sum(graph.mul(probs, graph.log(clamped)), axis=-1)
    entropy = graph.scale(plogp, -1.0 / np.log(2.0))
    offset = graph.constant(np.full(graph.shape(entropy), float(m - k)))
    return graph.add(entropy, offset)


def normalize(raw: np.ndarray, shaping: ShapingDistribution, m: int, k: int) -> ShapedConstellation:
    raw = np.asarray(raw, dtype=np.complex128).reshape(1, -1)
    graph = CompGraph()
    re, im = normalize_nodes(graph, graph.constant(raw.real), graph.constant(raw.imag),
                             graph.constant(shaping.probs[None, :]), m, k)
    points = graph.value(re)[0] + 1j * graph.value(im)[0]
    return ShapedConstellation(m, k, points, shaping)


def source_entropy(shaping: ShapingDistribution, m: int, k: int) -> float:
    """-sum p log2 p + (m - k); zero-probability terms contribute nothing"""
    return float(np.sum(entr(shaping.probs)) / np.log(2.0) + (m - k))


def symbol_indices(b_info: np.ndarray, b_parity: np.ndarray) -> np.ndarray:
    """Global point index for (..., k) info and (..., m-k) parity bit arrays"""
    return bits_to_int(np.concatenate([np.asarray(b_parity), np.asarray(b_info)], axis=-1))


def map_bits(b_info, b_parity, c: ShapedConstellation) -> complex:
    b_info, b_parity = np.asarray(b_info), np.asarray(b_parity)
    if b_info.shape[-1] + b_parity.shape[-1] != c.m:
        raise ValueError(f"got {b_info.shape[-1]} + {b_parity.shape[-1]} bits, expected {c.m}")
    # with a single sub-constellation every split of the label addresses the same point
    if c.k != c.m and b_info.shape[-1] != c.k:
        raise ValueError(f"expected {c.k} information bits, got {b_info.shape[-1]}")
    return c.points[symbol_indices(b_info, b_parity)]


def gray_code(n: int) -> np.ndarray:
    values = np.arange(n)
    return values ^ (values >> 1)


def qam_constellation(m: int, k: Optional[int] = None) -> ShapedConstellation:
    """
    Square Gray-labeled QAM with unit power under uniform probabilities.

    Each axis carries a reflected binary code whose leading bit is the sign;
    the label is [sign_re, sign_im | amplitude_re, amplitude_im]. Amplitude
    bits are mirror symmetric so the four quadrants are the sub-constellations
    for k = m - 2.
    """
    if m < 2 or m % 2:
        raise ValueError(f"square QAM needs an even m >= 2, got {m}")
    half = m // 2
    levels_per_axis = 2 ** half

    level_of_code = np.empty(levels_per_axis, dtype=np.int64)
    level_of_code[gray_code(levels_per_axis)] = np.arange(levels_per_axis)
    amplitudes = 2.0 * np.arange(levels_per_axis) - (levels_per_axis - 1)

    labels = label_table(m)
    amp_bits = half - 1
    re_code = bits_to_int(np.concatenate([labels[:, :1], labels[:, 2:2 + amp_bits]], axis=1))
    im_code = bits_to_int(np.concatenate([labels[:, 1:2], labels[:, 2 + amp_bits:]], axis=1))
    points = amplitudes[level_of_code[re_code]] + 1j * amplitudes[level_of_code[im_code]]
    points = points / np.sqrt(np.mean(np.abs(points) ** 2))

    if k is None:
        k = m - 2 if m > 2 else m
    return ShapedConstellation(m, k, points, ShapingDistribution.uniform(k))


def quadrant_points(m: int) -> np.ndarray:
    """Points of the first quadrant sub-constellation of unit-power Gray QAM"""
    return qam_constellation(m).subconstellation(0)


def export_constellation(c: ShapedConstellation, path, snr_db: Optional[float] = None) -> Path:
    """CSV with index, label, re, im, probability"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    probs = c.point_distribution.probs
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "label", "re", "im", "probability"])
        for t in range(2 ** c.m):
            label = "".join(str(b) for b in c.labels[t])
            writer.writerow([t, label, f"{c.points[t].real:.17g}", f"{c.points[t].imag:.17g}",
                             f"{probs[t]:.17g}"])
    where = "" if snr_db is None else f" at {snr_db:g} dB"
    logger.info(f"Exported {2 ** c.m}-point constellation{where} to {path}")
    return path
