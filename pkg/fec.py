"""
FEC Module
IEEE 802.11n quasi-cyclic LDPC codes (n = 1944): systematic encoding,
flooding sum-product decoding and the codeword to symbol bit placement.

Decoder input follows the package LLR convention ln p(1)/p(0).
"""

import logging
import threading
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

MATRIX_DIR = Path(__file__).resolve().parent / "ldpc_matrices"
BASE_MATRIX_FILES = {
    "1/2": "ieee80211n_n1944_r1_2.txt",
    "2/3": "ieee80211n_n1944_r2_3.txt",
}
LIFTING_SIZE = 81
LLR_CLIP = 30.0
PHI_FLOOR = 1e-12


def load_base_matrix(rate: str) -> np.ndarray:
    if rate not in BASE_MATRIX_FILES:
        raise ValueError(f"no embedded base matrix for rate {rate}, expected one of {tuple(BASE_MATRIX_FILES)}")
    return np.loadtxt(MATRIX_DIR / BASE_MATRIX_FILES[rate], dtype=np.int64, comments="#", ndmin=2)


def expand_base_matrix(base: np.ndarray, z: int) -> sparse.csr_matrix:
    """Each entry s >= 0 becomes the z x z identity rolled right by s"""
    rows, cols = [], []
    offsets = np.arange(z)
    for i, j in zip(*np.nonzero(base >= 0)):
        shift = base[i, j]
        rows.append(i * z + offsets)
        cols.append(j * z + (offsets + shift) % z)
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    shape = (base.shape[0] * z, base.shape[1] * z)
    return sparse.csr_matrix((np.ones(rows.size, dtype=np.int64), (rows, cols)), shape=shape)


def _phi(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, PHI_FLOOR, LLR_CLIP)
    return -np.log(np.tanh(x / 2.0))


class LdpcCode:
    """
    One 802.11n code: base matrix, expanded parity-check matrix and decoder state.

    The parity part of the base matrix has the standard shape: a first column
    with three shifts (equal top and bottom, a distinct middle one) followed by
    a dual diagonal of unshifted identities, which gives a linear-time encoder.
    """

    def __init__(self, rate: str = "2/3", z: int = LIFTING_SIZE, base: Optional[np.ndarray] = None):
        self.rate_name = str(rate)
        self.base = load_base_matrix(self.rate_name) if base is None else np.asarray(base, dtype=np.int64)
        self.z = z
        self.mb, self.nb = self.base.shape
        self.kb = self.nb - self.mb
        self.n = self.nb * z
        self.k = self.kb * z
        self.rate = Fraction(self.k, self.n)
        self.H = expand_base_matrix(self.base, z)
        self._prepare_encoder()
        self._prepare_decoder()
        self._decoder_state = threading.local()

    def _prepare_encoder(self):
        first = self.base[:, self.kb]
        rows = np.flatnonzero(first >= 0)
        if rows.size != 3 or first[rows[0]] != first[rows[2]]:
            raise ValueError("base matrix parity part does not have the 802.11n structure")
        self._middle_shift = int(first[rows[1]])
        self._info_blocks = [
            [(j, int(self.base[i, j])) for j in range(self.kb) if self.base[i, j] >= 0]
            for i in range(self.mb)
        ]

    def _prepare_decoder(self):
        H = self.H.tocsr()
        H.sort_indices()
        self._check_of_edge = np.repeat(np.arange(H.shape[0]), np.diff(H.indptr))
        self._var_of_edge = H.indices.astype(np.int64)
        self._row_starts = H.indptr[:-1]

    def _rotate(self, blocks: np.ndarray, shift: int) -> np.ndarray:
        """Multiply z-bit blocks (last axis) by the shifted identity"""
        return np.roll(blocks, -shift, axis=-1)

    def encode(self, info: np.ndarray) -> np.ndarray:
        """Systematic encoding [info | parity]; info may be (k,) or (batch, k)"""
        info = np.asarray(info, dtype=np.uint8)
        if info.shape[-1] != self.k:
            raise ValueError(f"expected {self.k} information bits, got {info.shape[-1]}")
        lead = info.shape[:-1]
        u = info.reshape(lead + (self.kb, self.z))

        lam = np.zeros(lead + (self.mb, self.z), dtype=np.uint8)
        for i, blocks in enumerate(self._info_blocks):
            for j, shift in blocks:
                lam[..., i, :] ^= self._rotate(u[..., j, :], shift)

        parity = np.zeros(lead + (self.mb, self.z), dtype=np.uint8)
        parity[..., 0, :] = np.roll(np.bitwise_xor.reduce(lam, axis=-2), self._middle_shift, axis=-1)
        top = int(self.base[0, self.kb])
        parity[..., 1, :] = lam[..., 0, :] ^ self._rotate(parity[..., 0, :], top)
        for i in range(1, self.mb - 1):
            block = lam[..., i, :] ^ parity[..., i, :]
            shift = self.base[i, self.kb]
            if shift >= 0:
                block = block ^ self._rotate(parity[..., 0, :], int(shift))
            parity[..., i + 1, :] = block
        return np.concatenate([info, parity.reshape(lead + (self.n - self.k,))], axis=-1)

    @property
    def last_iterations(self) -> int:
        """Iterations used by this thread's most recent decode"""
        return getattr(self._decoder_state, "iterations", 0)

    def syndrome(self, bits: np.ndarray) -> np.ndarray:
        return (self.H @ np.asarray(bits, dtype=np.int64)) % 2

    def is_codeword(self, bits: np.ndarray) -> bool:
        return not np.any(self.syndrome(bits))

    def decode(self, llrs: np.ndarray, max_iters: int = 100) -> Tuple[np.ndarray, bool]:
        """Flooding sum-product; stops as soon as the hard decision satisfies every check"""
        llrs = np.asarray(llrs, dtype=np.float64)
        if llrs.shape != (self.n,):
            raise ValueError(f"expected {self.n} LLRs, got shape {llrs.shape}")
        # internally positive values favour bit 0
        channel = np.clip(-llrs, -LLR_CLIP, LLR_CLIP)
        hard = (channel < 0).astype(np.uint8)
        state = self._decoder_state
        state.iterations = 0
        if self.is_codeword(hard):
            return hard, True

        checks, variables = self._check_of_edge, self._var_of_edge
        to_check = channel[variables]
        for iteration in range(1, max_iters + 1):
            magnitudes = _phi(np.abs(to_check))
            negative = (to_check < 0).astype(np.int64)
            total_phi = np.add.reduceat(magnitudes, self._row_starts)[checks]
            total_negative = np.add.reduceat(negative, self._row_starts)[checks]
            sign = 1.0 - 2.0 * ((total_negative - negative) % 2)
            to_variable = sign * _phi(np.maximum(total_phi - magnitudes, PHI_FLOOR))

            belief = channel + np.bincount(variables, weights=to_variable, minlength=self.n)
            to_check = np.clip(belief[variables] - to_variable, -LLR_CLIP, LLR_CLIP)
            hard = (belief < 0).astype(np.uint8)
            state.iterations = iteration
            if self.is_codeword(hard):
                return hard, True

        logger.debug(f"Decoder did not converge in {max_iters} iterations")
        return hard, False


@lru_cache(maxsize=None)
def get_code(rate: str = "2/3") -> LdpcCode:
    return LdpcCode(rate)


def encode(info: np.ndarray, code: LdpcCode) -> np.ndarray:
    return code.encode(info)


def decode(llrs: np.ndarray, code: LdpcCode, max_iters: int = 100) -> Tuple[np.ndarray, bool]:
    return code.decode(llrs, max_iters)


def bit_placement(c_info: np.ndarray, c_parity: np.ndarray, m: int, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Split codeword halves into per-symbol (b_I, b_P): (q, k) and (q, m-k)"""
    c_info, c_parity = np.asarray(c_info), np.asarray(c_parity)
    n = c_info.size + c_parity.size
    if n % m:
        raise ValueError(f"codeword length {n} is not divisible by m={m}")
    q = n // m
    if c_info.size != q * k or c_parity.size != q * (m - k):
        raise ValueError(f"{c_info.size} info and {c_parity.size} parity bits do not split into "
                         f"{q} symbols of {k} + {m - k} bits")
    return c_info.reshape(q, k), c_parity.reshape(q, m - k)


def bit_placement_inverse(b_info: np.ndarray, b_parity: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.asarray(b_info).reshape(-1), np.asarray(b_parity).reshape(-1)
