"""Two-party additive secret sharing over Z_{2^64} with Beaver multiplication.

A secret tensor ``X`` is held as two :class:`ShareVector` halves whose
elementwise wrapping sum is ``X``. The simulator keeps both halves in one
process; every function that needs the other party's data goes through a
:class:`~fusefl.transcript.Link` so the exchange is recorded.

Functions taking a ``Shared`` pair still compute each party's output only
from that party's own half plus values that were explicitly opened.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DealerExhausted, PartyMismatch, ShapeMismatch, TripleReuse
from .ring import RING_DTYPE, FixedPointCodec, as_ring, ring_matmul, truncate
from .transcript import Link

BYTES_PER_ELEMENT = 8


def random_ring(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 1 << 64, size=shape, dtype=np.uint64)


@dataclass
class ShareVector:
    party_id: int
    values: np.ndarray
    codec: FixedPointCodec = field(default_factory=FixedPointCodec)

    def __post_init__(self):
        if self.party_id not in (0, 1):
            raise PartyMismatch(f"party_id must be 0 or 1, got {self.party_id}")
        self.values = as_ring(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def with_values(self, values) -> ShareVector:
        return ShareVector(self.party_id, values, self.codec)


Shared = tuple[ShareVector, ShareVector]


def _check_pair(s0: ShareVector, s1: ShareVector) -> None:
    if {s0.party_id, s1.party_id} != {0, 1}:
        raise PartyMismatch("a shared secret needs one half from each party")
    if s0.shape != s1.shape:
        raise ShapeMismatch(f"share shapes differ: {s0.shape} vs {s1.shape}")
    if s0.codec != s1.codec:
        raise ShapeMismatch("share codecs differ")


def _check_same_party(x: ShareVector, y: ShareVector) -> None:
    if x.party_id != y.party_id:
        raise PartyMismatch(f"party {x.party_id} cannot combine with party {y.party_id}")
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {x.shape} vs {y.shape}")


def share(secret, rng: np.random.Generator, codec: FixedPointCodec | None = None) -> Shared:
    """Split ring elements into a uniform half and its complement."""
    codec = codec or FixedPointCodec()
    secret = as_ring(secret)
    r = random_ring(rng, secret.shape)
    return ShareVector(0, r, codec), ShareVector(1, secret - r, codec)


def share_real(x, rng: np.random.Generator, codec: FixedPointCodec | None = None) -> Shared:
    codec = codec or FixedPointCodec()
    return share(codec.encode(x), rng, codec)


def reconstruct(s0: ShareVector, s1: ShareVector) -> np.ndarray:
    _check_pair(s0, s1)
    return s0.values + s1.values


def reconstruct_real(pair: Shared) -> np.ndarray:
    return pair[0].codec.decode(reconstruct(*pair))


# --- local (communication-free) operations ---------------------------------

def add_shares(x: ShareVector, y: ShareVector) -> ShareVector:
    _check_same_party(x, y)
    return x.with_values(x.values + y.values)


def sub_shares(x: ShareVector, y: ShareVector) -> ShareVector:
    _check_same_party(x, y)
    return x.with_values(x.values - y.values)


def add(x: Shared, y: Shared) -> Shared:
    return add_shares(x[0], y[0]), add_shares(x[1], y[1])


def sub(x: Shared, y: Shared) -> Shared:
    return sub_shares(x[0], y[0]), sub_shares(x[1], y[1])


def neg(x: Shared) -> Shared:
    return tuple(s.with_values(np.uint64(0) - s.values) for s in x)


def scale_int(x: Shared, alpha: int) -> Shared:
    """Multiply by a public integer (no rescaling)."""
    a = np.uint64(int(alpha) % (1 << 64))
    return tuple(s.with_values(s.values * a) for s in x)


def add_public(x: Shared, value) -> Shared:
    """Add a public ring tensor; only party 0 touches its half."""
    value = as_ring(value)
    return x[0].with_values(x[0].values + value), x[1].with_values(x[1].values + np.zeros_like(value))


def truncate_share(x: ShareVector, frac_bits: int) -> ShareVector:
    """One party's half of :func:`truncate_shares`, computable in isolation."""
    t = truncate(x.values, frac_bits)
    return x.with_values(t + np.uint64(1) if x.party_id == 0 else t)


def truncate_shares(x: Shared, frac_bits: int) -> Shared:
    """Local rescaling of a shared fixed-point product.

    Each party shifts its own half. The shifted halves sum to
    ``floor(X / 2^f) - 1 + [carry]`` where the carry happens with
    probability equal to the dropped fraction, so party 0 adds one unit
    to make the result an unbiased stochastic rounding of ``X / 2^f``
    (error strictly below one unit in the last place). As with any local
    truncation, a share pair straddling the wrap point yields a large
    error with probability about ``|X| / 2^63``.
    """
    return truncate_share(x[0], frac_bits), truncate_share(x[1], frac_bits)


def mul_public(x: Shared, c: float) -> Shared:
    """Multiply by a public real constant encoded with the shares' codec."""
    codec = x[0].codec
    return truncate_shares(scale_int(x, codec.encode_int(c)), codec.frac_bits)


def reshape(x: Shared, shape) -> Shared:
    return tuple(s.with_values(s.values.reshape(shape)) for s in x)


def transpose(x: Shared, axes=None) -> Shared:
    return tuple(s.with_values(np.ascontiguousarray(np.transpose(s.values, axes))) for s in x)


def sum_axis(x: Shared, axis) -> Shared:
    return tuple(s.with_values(s.values.sum(axis=axis, dtype=RING_DTYPE)) for s in x)


def zeros_like(x: Shared) -> Shared:
    return tuple(s.with_values(np.zeros_like(s.values)) for s in x)


def zeros(shape, codec: FixedPointCodec | None = None) -> Shared:
    codec = codec or FixedPointCodec()
    z = np.zeros(shape, dtype=RING_DTYPE)
    return ShareVector(0, z, codec), ShareVector(1, z.copy(), codec)


def rerandomize(x: Shared, rng: np.random.Generator) -> Shared:
    """Refresh the split of a shared value without changing the secret."""
    r = random_ring(rng, x[0].shape)
    return x[0].with_values(x[0].values + r), x[1].with_values(x[1].values - r)


# --- Beaver triples -----------------------------------------------------------

@dataclass
class BeaverTriple:
    """Correlated randomness for one multiplication.

    ``a``, ``b``, ``c`` are shared pairs with ``c = a * b`` (elementwise) or
    ``c = a @ b`` when ``kind == "matmul"``.
    """

    a: Shared
    b: Shared
    c: Shared
    kind: str
    serial: int
    used: bool = False

    @property
    def x_shape(self):
        return self.a[0].shape

    @property
    def y_shape(self):
        return self.b[0].shape

    def consume(self) -> None:
        if self.used:
            raise TripleReuse(f"triple #{self.serial} was already consumed")
        self.used = True

    def nbytes_per_party(self) -> int:
        return BYTES_PER_ELEMENT * (self.a[0].size + self.b[0].size + self.c[0].size)


class TripleDealer:
    """Seeded trusted dealer producing Beaver triples.

    The same seed yields the same triple stream. ``budget`` caps the number
    of triples that may be issued (``None`` for unlimited).
    """

    def __init__(self, rng_seed: int = 0, codec: FixedPointCodec | None = None,
                 budget: int | None = None):
        self.rng_seed = rng_seed
        self.codec = codec or FixedPointCodec()
        self.budget = budget
        self.issued_count = 0
        self._rng = np.random.default_rng(rng_seed)

    @property
    def rng(self) -> np.random.Generator:
        return self._rng

    def _next_serial(self) -> int:
        if self.budget is not None and self.issued_count >= self.budget:
            raise DealerExhausted(f"dealer budget of {self.budget} triples exhausted")
        self.issued_count += 1
        return self.issued_count

    def _pair(self, secret) -> Shared:
        return share(secret, self._rng, self.codec)

    def mul_triple(self, shape, link: Link | None = None) -> BeaverTriple:
        serial = self._next_serial()
        a = random_ring(self._rng, shape)
        b = random_ring(self._rng, shape)
        t = BeaverTriple(self._pair(a), self._pair(b), self._pair(a * b), "mul", serial)
        if link is not None:
            link.offline(t.nbytes_per_party(), "triple")
        return t

    def matmul_triple(self, x_shape, y_shape, link: Link | None = None) -> BeaverTriple:
        if len(x_shape) != 2 or len(y_shape) != 2 or x_shape[1] != y_shape[0]:
            raise ShapeMismatch(f"cannot multiply {x_shape} by {y_shape}")
        serial = self._next_serial()
        a = random_ring(self._rng, x_shape)
        b = random_ring(self._rng, y_shape)
        t = BeaverTriple(self._pair(a), self._pair(b), self._pair(ring_matmul(a, b)), "matmul", serial)
        if link is not None:
            link.offline(t.nbytes_per_party(), "triple")
        return t


def deal_triples(dealer: TripleDealer, shape, count: int, link: Link | None = None) -> list[BeaverTriple]:
    """``count`` elementwise triples of ``shape`` from ``dealer``."""
    return [dealer.mul_triple(shape, link) for _ in range(count)]


# --- multiplication -------------------------------------------------------------

def _open_masked(x: Shared, y: Shared, triple: BeaverTriple, link: Link):
    triple.consume()
    e_parts = [x[j].values - triple.a[j].values for j in (0, 1)]
    f_parts = [y[j].values - triple.b[j].values for j in (0, 1)]
    # each party sends (E_j, F_j) to the other in a single round
    link.exchange(BYTES_PER_ELEMENT * (x[0].size + y[0].size), "beaver")
    return e_parts[0] + e_parts[1], f_parts[0] + f_parts[1]


def mul_shares(x: Shared, y: Shared, triple: BeaverTriple, link: Link,
               rescale: bool = True) -> Shared:
    """Elementwise product of two shared tensors.

    Party ``j`` forms ``j*E*F + F*a_j + E*b_j + c_j`` after ``E = X - a`` and
    ``F = Y - b`` are opened. With ``rescale`` the fixed-point product is
    brought back to ``frac_bits`` by :func:`truncate_shares`; pass
    ``rescale=False`` when one operand is an unscaled integer (e.g. a bit).
    """
    _check_pair(*x)
    _check_pair(*y)
    if triple.kind != "mul" or x[0].shape != triple.x_shape or y[0].shape != triple.y_shape:
        raise ShapeMismatch(f"triple {triple.kind}{triple.x_shape} does not fit operands {x[0].shape}, {y[0].shape}")
    e, f = _open_masked(x, y, triple, link)
    z = []
    for j in (0, 1):
        zj = f * triple.a[j].values + e * triple.b[j].values + triple.c[j].values
        if j == 1:
            zj = zj + e * f
        z.append(x[j].with_values(zj))
    out = (z[0], z[1])
    return truncate_shares(out, x[0].codec.frac_bits) if rescale else out


def matmul_shares(x: Shared, y: Shared, triple: BeaverTriple, link: Link,
                  rescale: bool = True) -> Shared:
    """Matrix product ``X @ Y`` of shared matrices via a matrix triple."""
    _check_pair(*x)
    _check_pair(*y)
    if triple.kind != "matmul" or x[0].shape != triple.x_shape or y[0].shape != triple.y_shape:
        raise ShapeMismatch(f"triple {triple.kind}{triple.x_shape}x{triple.y_shape} does not fit "
                            f"operands {x[0].shape}, {y[0].shape}")
    e, f = _open_masked(x, y, triple, link)
    z = []
    for j in (0, 1):
        zj = ring_matmul(e, triple.b[j].values) + ring_matmul(triple.a[j].values, f) + triple.c[j].values
        if j == 1:
            zj = zj + ring_matmul(e, f)
        z.append(x[j].with_values(zj))
    out = (z[0], z[1])
    return truncate_shares(out, x[0].codec.frac_bits) if rescale else out


def mul_cost(x_size: int, y_size: int) -> int:
    """Bytes each party sends for one Beaver opening."""
    return BYTES_PER_ELEMENT * (x_size + y_size)

