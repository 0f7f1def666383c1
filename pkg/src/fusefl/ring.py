"""Arithmetic in Z_{2^64} and the fixed-point codec for reals.

Ring elements are carried as ``numpy.uint64`` arrays. NumPy integer array
arithmetic wraps silently, which is exactly reduction modulo 2^64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OutOfRange

RING_BITS = 64
RING_DTYPE = np.uint64
MASK64 = (1 << 64) - 1


def as_ring(values) -> np.ndarray:
    """Coerce Python ints / integer arrays into ring elements (mod 2^64)."""
    if not isinstance(values, (np.ndarray, np.generic)):
        # numpy may route big Python ints through float64; keep them exact
        obj = np.asarray(values, dtype=object)
        if all(isinstance(v, (int, np.integer)) for v in obj.reshape(-1)):
            return np.array([int(v) & MASK64 for v in obj.reshape(-1)], dtype=RING_DTYPE).reshape(obj.shape)
    arr = np.asarray(values)
    if arr.dtype == RING_DTYPE:
        return arr
    if arr.dtype == object or arr.dtype.kind == "f":
        flat = [int(v) & MASK64 for v in arr.reshape(-1)]
        return np.array(flat, dtype=RING_DTYPE).reshape(arr.shape)
    if arr.dtype.kind == "i":
        return arr.astype(np.int64).view(RING_DTYPE)
    return arr.astype(RING_DTYPE)


def to_signed(v: np.ndarray) -> np.ndarray:
    """Two's-complement view of ring elements as int64."""
    return np.asarray(v, dtype=RING_DTYPE).view(np.int64)


def from_signed(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.int64).view(RING_DTYPE)


def truncate(v: np.ndarray, frac_bits: int) -> np.ndarray:
    """Arithmetic right shift in the signed interpretation."""
    return from_signed(to_signed(v) >> np.int64(frac_bits))


def ring_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # integer matmul wraps mod 2^64 like the elementwise ops
    return np.matmul(np.asarray(a, dtype=RING_DTYPE), np.asarray(b, dtype=RING_DTYPE))


@dataclass(frozen=True)
class FixedPointCodec:
    """Maps reals to ring elements with ``frac_bits`` fractional bits.

    Negative reals are stored as the two's complement of the scaled
    magnitude, so decoding is a signed reinterpretation followed by a
    division by the scale.
    """

    frac_bits: int = 16
    total_bits: int = RING_BITS

    def __post_init__(self):
        if self.total_bits != RING_BITS:
            raise ValueError("total_bits is fixed at 64")
        if not 0 <= self.frac_bits <= 62:
            raise ValueError(f"frac_bits must lie in [0, 62], got {self.frac_bits}")

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def bound(self) -> float:
        """Exclusive magnitude bound for encodable reals."""
        return float(2 ** (RING_BITS - 1 - self.frac_bits))

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.frac_bits

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) >= self.bound):
            raise OutOfRange(f"|x| must be < 2^{RING_BITS - 1 - self.frac_bits}")
        scaled = x * self.scale
        # round half away from zero
        rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
        return from_signed(rounded.astype(np.int64))

    def decode(self, v) -> np.ndarray:
        return to_signed(as_ring(v)).astype(np.float64) / self.scale

    def quantize(self, x) -> np.ndarray:
        """The real value actually represented after encoding ``x``."""
        return self.decode(self.encode(x))

    def encode_int(self, x) -> int:
        """Encode a public scalar constant as a Python int in [0, 2^64)."""
        return int(self.encode(x)) & MASK64


def encode(x, codec: FixedPointCodec = FixedPointCodec()) -> np.ndarray:
    return codec.encode(x)


def decode(v, codec: FixedPointCodec = FixedPointCodec()) -> np.ndarray:
    return codec.decode(v)
