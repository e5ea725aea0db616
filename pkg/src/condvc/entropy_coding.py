"""Byte-oriented range coder and the integer CDF tables it codes with.

The coder is a 32-bit carry-propagating range coder (LZMA style) working on
frequency tables whose total is ``2**PRECISION``. Tables are built from
probability masses by :func:`quantize_pmf`, which guarantees every symbol a
frequency of at least one.

Symbols outside a table's support are sent through an escape symbol followed
by an Exp-Golomb code made of equiprobable bypass bits.

Stream layout: the encoder emits ``4 + n_renormalizations`` bytes, which is
exactly what the decoder consumes, so a stream carrying no symbols is four
bytes long.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import ndtr

PRECISION = 16
TOTAL = 1 << PRECISION
FLUSH_BYTES = 4

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_HALF = TOTAL // 2
_MAX_GOLOMB_PREFIX = 40


class RangeCoderError(Exception):
    """Raised when a stream is inconsistent with the tables used to decode it."""

    def __init__(self, message: str, symbol_index: int | None = None):
        if symbol_index is not None:
            message = f"{message} at symbol {symbol_index}"
        super().__init__(message)
        self.symbol_index = symbol_index


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.n_shifts = 0
        self._out = bytearray()

    def encode(self, start: int, freq: int) -> None:
        r = self.range >> PRECISION
        self.low += start * r
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()
            self.n_shifts += 1

    def encode_bit(self, bit: int) -> None:
        self.encode(_HALF if bit else 0, _HALF)

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def finish(self) -> bytes:
        for _ in range(FLUSH_BYTES):
            self._shift_low()
        # low is now zero, so no carry can reach the pending bytes
        self._out.append(self.cache)
        self._out.extend(b"\xff" * (self.cache_size - 1))
        # the first byte is always zero and the decoder never needs the last one
        return bytes(self._out[1:1 + FLUSH_BYTES + self.n_shifts])


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        self._r = 0
        self.symbol_index = 0
        for _ in range(FLUSH_BYTES):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise RangeCoderError("stream truncated", self.symbol_index)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_freq(self) -> int:
        self._r = self.range >> PRECISION
        value = self.code // self._r
        if value >= TOTAL:
            raise RangeCoderError("code value outside the coding interval", self.symbol_index)
        return value

    def update(self, start: int, freq: int) -> None:
        self.code -= start * self._r
        self.range = self._r * freq
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32
            self.range <<= 8

    def decode_bit(self) -> int:
        bit = 1 if self.decode_freq() >= _HALF else 0
        self.update(_HALF if bit else 0, _HALF)
        return bit

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.data)


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Turn probabilities (summing to ~1) into integer frequencies summing to TOTAL.

    Every symbol receives at least one count; the leftover mass goes to the
    most probable symbol. Deterministic for identical inputs.
    """
    pmf = np.clip(np.asarray(pmf, dtype=np.float64), 0.0, None)
    n = pmf.size
    if n >= TOTAL:
        raise ValueError(f"alphabet of {n} symbols does not fit {PRECISION}-bit precision")
    s = pmf.sum()
    if s > 0:
        pmf = pmf / s
    freqs = np.floor(pmf * (TOTAL - n)).astype(np.int64) + 1
    freqs[int(np.argmax(freqs))] += TOTAL - int(freqs.sum())
    return freqs


@dataclass(frozen=True)
class CodingTable:
    """Symbol alphabet ``[-half_width, half_width]`` plus one escape symbol."""

    half_width: int
    cdf: tuple[int, ...]

    @classmethod
    def from_pmf(cls, pmf: np.ndarray, tail: float) -> "CodingTable":
        pmf = np.asarray(pmf, dtype=np.float64)
        half_width = (pmf.size - 1) // 2
        freqs = quantize_pmf(np.append(pmf, max(tail, 0.0)))
        cdf = np.concatenate([[0], np.cumsum(freqs)])
        return cls(half_width, tuple(int(c) for c in cdf))

    @property
    def escape(self) -> int:
        return 2 * self.half_width + 1

    def bits(self, symbol: int) -> float:
        return -math.log2((self.cdf[symbol + 1] - self.cdf[symbol]) / TOTAL)


def _encode_value(enc: RangeEncoder, table: CodingTable, value: int) -> None:
    offset = value + table.half_width
    if 0 <= offset < table.escape:
        enc.encode(table.cdf[offset], table.cdf[offset + 1] - table.cdf[offset])
        return
    esc = table.escape
    enc.encode(table.cdf[esc], table.cdf[esc + 1] - table.cdf[esc])
    enc.encode_bit(1 if value < 0 else 0)
    m = abs(value) - table.half_width  # >= 1
    n_bits = m.bit_length() - 1
    for _ in range(n_bits):
        enc.encode_bit(1)
    enc.encode_bit(0)
    for i in range(n_bits - 1, -1, -1):
        enc.encode_bit((m >> i) & 1)


def _decode_value(dec: RangeDecoder, table: CodingTable) -> int:
    v = dec.decode_freq()
    sym = bisect_right(table.cdf, v) - 1
    dec.update(table.cdf[sym], table.cdf[sym + 1] - table.cdf[sym])
    if sym != table.escape:
        return sym - table.half_width
    negative = dec.decode_bit()
    n_bits = 0
    while dec.decode_bit():
        n_bits += 1
        if n_bits > _MAX_GOLOMB_PREFIX:
            raise RangeCoderError("escape code too long", dec.symbol_index)
    m = 1
    for _ in range(n_bits):
        m = (m << 1) | dec.decode_bit()
    mag = m + table.half_width
    return -mag if negative else mag


def encode_values(values: Sequence[int], tables: Sequence[CodingTable]) -> bytes:
    """Range-code integer ``values[i]`` with ``tables[i]``."""
    if len(values) != len(tables):
        raise ValueError("one table per value is required")
    enc = RangeEncoder()
    for v, t in zip(values, tables):
        _encode_value(enc, t, int(v))
    return enc.finish()


def decode_values(data: bytes, tables: Sequence[CodingTable]) -> list[int]:
    """Inverse of :func:`encode_values`; rejects streams with leftover bytes."""
    dec = RangeDecoder(data)
    out = []
    for i, t in enumerate(tables):
        dec.symbol_index = i
        out.append(_decode_value(dec, t))
    if not dec.exhausted:
        raise RangeCoderError(
            f"{len(data) - dec.pos} unread bytes after the last symbol", len(tables)
        )
    return out


# ---------------------------------------------------------------------------
# Gaussian tables: fractional mean quantized to 1/MEAN_STEPS, scale snapped to
# a log-spaced grid. Both encoder and decoder key tables by these integers.

SIGMA_MIN = 0.04
SIGMA_MAX = 256.0
N_SCALES = 160
MEAN_STEPS = 32
TAIL_SIGMAS = 6.0

_LOG_SIGMA_MIN = math.log(SIGMA_MIN)
_LOG_STEP = (math.log(SIGMA_MAX) - _LOG_SIGMA_MIN) / (N_SCALES - 1)


def scale_table() -> np.ndarray:
    return np.exp(_LOG_SIGMA_MIN + _LOG_STEP * np.arange(N_SCALES))


@lru_cache(maxsize=None)
def gaussian_table(mean_index: int, scale_index: int) -> CodingTable:
    frac = mean_index / MEAN_STEPS
    sigma = float(scale_table()[scale_index])
    half_width = int(math.ceil(TAIL_SIGMAS * sigma)) + 1
    j = np.arange(-half_width, half_width + 1, dtype=np.float64)
    upper = ndtr((j - frac + 0.5) / sigma)
    lower = ndtr((j - frac - 0.5) / sigma)
    pmf = upper - lower
    tail = ndtr((-half_width - frac - 0.5) / sigma) + ndtr((frac - half_width - 0.5) / sigma)
    return CodingTable.from_pmf(pmf, tail)


def gaussian_keys(mu: np.ndarray, sigma: np.ndarray):
    """Split each mean into an integer center and a table key ``(mean_idx, scale_idx)``."""
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    centers = np.floor(mu + 0.5)
    mean_idx = np.rint((mu - centers) * MEAN_STEPS).astype(np.int64)
    log_s = np.log(np.clip(sigma, SIGMA_MIN, SIGMA_MAX))
    scale_idx = np.clip(np.rint((log_s - _LOG_SIGMA_MIN) / _LOG_STEP), 0, N_SCALES - 1).astype(np.int64)
    return centers.astype(np.int64), mean_idx, scale_idx


def encode_gaussian(values, mu, sigma) -> bytes:
    """Code integer lattice indices under per-symbol discretized Gaussians."""
    values = np.asarray(values).ravel()
    centers, mean_idx, scale_idx = gaussian_keys(mu, sigma)
    if values.size != centers.size:
        raise ValueError("values, mu and sigma must have the same number of elements")
    tables = [gaussian_table(int(m), int(s)) for m, s in zip(mean_idx, scale_idx)]
    return encode_values((values - centers).tolist(), tables)


def decode_gaussian(data: bytes, mu, sigma) -> np.ndarray:
    centers, mean_idx, scale_idx = gaussian_keys(mu, sigma)
    tables = [gaussian_table(int(m), int(s)) for m, s in zip(mean_idx, scale_idx)]
    offsets = np.asarray(decode_values(data, tables), dtype=np.int64)
    return offsets + centers


def shannon_bits(symbols: Sequence[int], pmf: np.ndarray) -> float:
    """Ideal code length of ``symbols`` drawn from ``pmf``."""
    pmf = np.asarray(pmf, dtype=np.float64)
    return float(-np.log2(pmf[np.asarray(symbols)]).sum())
