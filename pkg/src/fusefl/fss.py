"""Function secret sharing for the sign / comparison gate.

The gate works on a publicly opened masked value ``X_c = X + R (mod 2^n)``
where ``n = domain_bits`` and ``R`` is a dealer-chosen mask. Party ``b``
evaluates its key on ``X_c`` and the two outputs add up (mod 2^64) to the
bit ``[signed_n(X_c - R) < 0]``, i.e. the sign of ``X`` whenever
``|X| < 2^(n-1)``.

Writing ``x = X_c`` and splitting off the top bit,
``msb(x - R) = msb(x) xor msb(R) xor [low(x) < low(R)]``. The last term is a
distributed comparison function (DCF) on ``n - 1`` bits with secret
threshold ``low(R)``. The xor with the secret ``msb(R)`` is folded into the
DCF payload ``beta = 1 - 2*msb(R)`` plus an additive share of ``msb(R)``;
the xor with the public ``msb(x)`` is a local affine flip.

The DCF is the binary-tree construction with per-level correction words
(Boyle et al., "Function Secret Sharing for Mixed-Mode and Fixed-Point
Secure Computation", 2021). The PRG is fixed-key AES in
Matyas-Meyer-Oseas mode, evaluated in large ECB batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import KeyReuse, ShapeMismatch
from .ring import RING_DTYPE, FixedPointCodec
from .sharing import BeaverTriple, Shared, ShareVector, mul_shares, random_ring, share
from .transcript import Link

_PRG_KEY = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
_TWEAKS = np.array([[0, 0], [1, 0], [2, 0]], dtype=np.uint64)
_LSB_CLEAR = np.uint64(0xFFFFFFFFFFFFFFFE)


def _aes_blocks(blocks: np.ndarray) -> np.ndarray:
    enc = Cipher(algorithms.AES(_PRG_KEY), modes.ECB()).encryptor()
    raw = enc.update(np.ascontiguousarray(blocks).tobytes()) + enc.finalize()
    return np.frombuffer(raw, dtype=np.uint64).reshape(blocks.shape)


def prg(seeds: np.ndarray):
    """Expand 128-bit seeds (shape ``(N, 2)``) into left/right children.

    Returns ``(sL, tL, vL, sR, tR, vR)``.
    """
    inp = seeds[None, :, :] ^ _TWEAKS[:, None, :]
    out = _aes_blocks(inp) ^ inp
    s_l, s_r, v = out[0].copy(), out[1].copy(), out[2]
    t_l = (s_l[:, 0] & np.uint64(1)).astype(np.uint8)
    t_r = (s_r[:, 0] & np.uint64(1)).astype(np.uint8)
    s_l[:, 0] &= _LSB_CLEAR
    s_r[:, 0] &= _LSB_CLEAR
    return s_l, t_l, v[:, 0].copy(), s_r, t_r, v[:, 1].copy()


def _sign(t: np.ndarray) -> np.ndarray:
    """(-1)^t as ring elements."""
    return np.where(t.astype(bool), np.uint64(0xFFFFFFFFFFFFFFFF), np.uint64(1))


@dataclass
class DCFKey:
    """One party's DCF keys for a batch of ``N`` independent thresholds."""

    party: int
    bits: int
    seed: np.ndarray        # (N, 2) uint64
    cw_seed: np.ndarray     # (bits, N, 2) uint64
    cw_value: np.ndarray    # (bits, N) uint64
    cw_t_left: np.ndarray   # (bits, N) uint8
    cw_t_right: np.ndarray  # (bits, N) uint8
    cw_final: np.ndarray    # (N,) uint64

    def to_bytes(self) -> bytes:
        parts = (self.seed, self.cw_seed, self.cw_value, self.cw_t_left, self.cw_t_right, self.cw_final)
        return bytes([self.party, self.bits]) + b"".join(np.ascontiguousarray(p).tobytes() for p in parts)

    def take(self, idx) -> DCFKey:
        return DCFKey(self.party, self.bits, self.seed[idx], self.cw_seed[:, idx], self.cw_value[:, idx],
                      self.cw_t_left[:, idx], self.cw_t_right[:, idx], self.cw_final[idx])


def dcf_gen(alpha: np.ndarray, beta: np.ndarray, bits: int, rng: np.random.Generator) -> tuple[DCFKey, DCFKey]:
    """Keys for ``f(x) = beta if x < alpha else 0`` on ``bits``-bit inputs."""
    alpha = np.asarray(alpha, dtype=RING_DTYPE).reshape(-1)
    beta = np.asarray(beta, dtype=RING_DTYPE).reshape(-1)
    n = alpha.size
    s = [random_ring(rng, (n, 2)), random_ring(rng, (n, 2))]
    t = [np.zeros(n, np.uint8), np.ones(n, np.uint8)]
    seeds0 = [s[0].copy(), s[1].copy()]
    v_alpha = np.zeros(n, RING_DTYPE)
    cw_seed = np.zeros((bits, n, 2), RING_DTYPE)
    cw_value = np.zeros((bits, n), RING_DTYPE)
    cw_tl = np.zeros((bits, n), np.uint8)
    cw_tr = np.zeros((bits, n), np.uint8)
    for i in range(bits):
        a_i = ((alpha >> np.uint64(bits - 1 - i)) & np.uint64(1)).astype(np.uint8)
        go_right = a_i.astype(bool)
        exp = [prg(s[0]), prg(s[1])]
        s_keep, t_keep, v_keep, s_lose, v_lose = [], [], [], [], []
        for b in (0, 1):
            s_l, t_l, v_l, s_r, t_r, v_r = exp[b]
            s_keep.append(np.where(go_right[:, None], s_r, s_l))
            t_keep.append(np.where(go_right, t_r, t_l))
            v_keep.append(np.where(go_right, v_r, v_l))
            s_lose.append(np.where(go_right[:, None], s_l, s_r))
            v_lose.append(np.where(go_right, v_l, v_r))
        sgn = _sign(t[1])
        s_cw = s_lose[0] ^ s_lose[1]
        v_cw = sgn * (v_lose[1] - v_lose[0] - v_alpha)
        # losing the left branch means every input there lies below alpha
        v_cw = v_cw + np.where(go_right, sgn * beta, np.uint64(0))
        v_alpha = v_alpha - v_keep[1] + v_keep[0] + sgn * v_cw
        t_cw_l = exp[0][1] ^ exp[1][1] ^ a_i ^ np.uint8(1)
        t_cw_r = exp[0][4] ^ exp[1][4] ^ a_i
        t_cw_keep = np.where(go_right, t_cw_r, t_cw_l)
        cw_seed[i], cw_value[i], cw_tl[i], cw_tr[i] = s_cw, v_cw, t_cw_l, t_cw_r
        for b in (0, 1):
            tb = t[b].astype(bool)
            s[b] = s_keep[b] ^ np.where(tb[:, None], s_cw, np.uint64(0))
            t[b] = t_keep[b] ^ (t[b] & t_cw_keep)
    cw_final = _sign(t[1]) * (s[1][:, 0] - s[0][:, 0] - v_alpha)
    return tuple(DCFKey(b, bits, seeds0[b], cw_seed, cw_value, cw_tl, cw_tr, cw_final) for b in (0, 1))


def dcf_eval(key: DCFKey, x: np.ndarray) -> np.ndarray:
    """Party ``key.party``'s additive share of ``f(x)``; ``x`` aligns with the key batch."""
    x = np.asarray(x, dtype=RING_DTYPE).reshape(-1)
    n = x.size
    if key.seed.shape[0] != n:
        raise ShapeMismatch(f"{key.seed.shape[0]} keys cannot evaluate {n} inputs")
    s = key.seed
    t = np.full(n, key.party, np.uint8)
    v = np.zeros(n, RING_DTYPE)
    for i in range(key.bits):
        s_l, t_l, v_l, s_r, t_r, v_r = prg(s)
        tb = t.astype(bool)
        corr = np.where(tb[:, None], key.cw_seed[i], np.uint64(0))
        s_l, s_r = s_l ^ corr, s_r ^ corr
        t_l = t_l ^ (t & key.cw_t_left[i])
        t_r = t_r ^ (t & key.cw_t_right[i])
        right = ((x >> np.uint64(key.bits - 1 - i)) & np.uint64(1)).astype(bool)
        v = v + np.where(right, v_r, v_l) + np.where(tb, key.cw_value[i], np.uint64(0))
        s = np.where(right[:, None], s_r, s_l)
        t = np.where(right, t_r, t_l)
    v = v + s[:, 0] + np.where(t.astype(bool), key.cw_final, np.uint64(0))
    return v if key.party == 0 else np.uint64(0) - v


# --- comparison keys ---------------------------------------------------------------

@dataclass
class CmpKeyPair:
    """Single-use keys for a batch of sign gates.

    ``mask`` is the additive sharing of ``R``. ``backend`` is ``"dcf"`` for
    the tree-based construction or ``"table"`` for a non-cryptographic
    stand-in (both outputs derive from ``R`` directly) used to speed up
    large protocol tests; the two backends are interchangeable.
    """

    shape: tuple[int, ...]
    domain_bits: int
    mask: Shared
    backend: str
    _dcf: tuple[DCFKey, DCFKey] | None = None
    _msb_share: tuple[np.ndarray, np.ndarray] | None = None
    _table_r: np.ndarray | None = None
    _table_seed: int = 0
    used: bool = False

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def key_bytes(self, party: int) -> bytes:
        """Serialized key material held by ``party`` (excluding the mask share)."""
        if self.backend == "dcf":
            return self._dcf[party].to_bytes() + np.ascontiguousarray(self._msb_share[party]).tobytes()
        return bytes([party]) + self._table_r.tobytes() + int(self._table_seed).to_bytes(8, "little")

    def offline_bytes_per_party(self) -> int:
        return len(self.key_bytes(0)) + 8 * self.size

    def eval_party(self, party: int, x) -> np.ndarray:
        """Evaluate ``party``'s key on public masked inputs without consuming it.

        ``x`` must have ``self.shape`` (or be flat of the same size).
        """
        n = self.domain_bits
        mod = np.uint64((1 << n) - 1) if n < 64 else np.uint64(0xFFFFFFFFFFFFFFFF)
        x = np.asarray(x, dtype=RING_DTYPE).reshape(-1) & mod
        if x.size != self.size:
            raise ShapeMismatch(f"expected {self.size} masked inputs, got {x.size}")
        if self.backend == "table":
            return self._table_eval(party, x).reshape(self.shape)
        hi = np.uint64(n - 1)
        x_msb = (x >> hi) & np.uint64(1)
        x_low = x & ((np.uint64(1) << hi) - np.uint64(1))
        out = self._msb_share[party] + dcf_eval(self._dcf[party], x_low)
        flip = x_msb.astype(bool)
        flipped = (np.uint64(1) if party == 0 else np.uint64(0)) - out
        return np.where(flip, flipped, out).reshape(self.shape)

    def _table_eval(self, party: int, x: np.ndarray) -> np.ndarray:
        n = self.domain_bits
        mod = (1 << n) - 1 if n < 64 else 0xFFFFFFFFFFFFFFFF
        diff = (x - self._table_r) & np.uint64(mod)
        bit = (diff >> np.uint64(n - 1)) & np.uint64(1)
        z = _splitmix64(x ^ np.uint64(self._table_seed))
        return bit - z if party == 0 else z

    def repeat(self, count: int) -> CmpKeyPair:
        """Fresh single-gate copies of a size-1 key, for evaluating one key on many inputs."""
        if self.size != 1:
            raise ShapeMismatch("only a single-gate key can be repeated")
        idx = np.zeros(count, dtype=np.intp)
        mask = tuple(m.with_values(np.repeat(m.values.reshape(-1), count)) for m in self.mask)
        if self.backend == "table":
            return CmpKeyPair((count,), self.domain_bits, mask, "table",
                              _table_r=np.repeat(self._table_r, count), _table_seed=self._table_seed)
        return CmpKeyPair((count,), self.domain_bits, mask, "dcf",
                          _dcf=tuple(k.take(idx) for k in self._dcf),
                          _msb_share=tuple(m[idx] for m in self._msb_share))

    def mask_value(self) -> np.ndarray:
        """The mask ``R`` itself; for tests and oracles only."""
        return self.mask[0].values + self.mask[1].values

    def consume(self) -> None:
        if self.used:
            raise KeyReuse("comparison keys are valid for exactly one masked evaluation")
        self.used = True


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def keygen_cmp(rng: np.random.Generator, domain_bits: int = 32, shape=(),
               codec: FixedPointCodec | None = None, backend: str = "dcf") -> CmpKeyPair:
    if not 8 <= domain_bits <= 64:
        raise ValueError("domain_bits must lie in [8, 64]")
    if backend not in ("dcf", "table"):
        raise ValueError(f"unknown FSS backend {backend!r}")
    codec = codec or FixedPointCodec()
    shape = tuple(shape)
    size = int(np.prod(shape, dtype=np.int64))
    r = random_ring(rng, size)
    if domain_bits < 64:
        r &= np.uint64((1 << domain_bits) - 1)
    mask = share(r.reshape(shape), rng, codec)
    if backend == "table":
        seed = int(rng.integers(0, 1 << 63))
        return CmpKeyPair(shape, domain_bits, mask, backend, _table_r=r, _table_seed=seed)
    hi = np.uint64(domain_bits - 1)
    r_msb = (r >> hi) & np.uint64(1)
    r_low = r & ((np.uint64(1) << hi) - np.uint64(1))
    beta = np.uint64(1) - np.uint64(2) * r_msb
    keys = dcf_gen(r_low, beta, domain_bits - 1, rng)
    m0 = random_ring(rng, size)
    return CmpKeyPair(shape, domain_bits, mask, backend, _dcf=keys, _msb_share=(m0, r_msb - m0))


class CmpKeyDealer:
    """Seeded source of comparison keys; charges key material as offline bytes."""

    def __init__(self, rng_seed: int = 0, domain_bits: int = 32, backend: str = "dcf",
                 codec: FixedPointCodec | None = None):
        self.rng_seed = rng_seed
        self.domain_bits = domain_bits
        self.backend = backend
        self.codec = codec or FixedPointCodec()
        self.issued_count = 0
        self._rng = np.random.default_rng(rng_seed)

    def issue(self, shape, link: Link | None = None) -> CmpKeyPair:
        keys = keygen_cmp(self._rng, self.domain_bits, shape, self.codec, self.backend)
        self.issued_count += 1
        if link is not None:
            link.offline(keys.offline_bytes_per_party(), "cmp_key")
        return keys


def sign_open_bytes(size: int, domain_bits: int) -> int:
    """Bytes each party sends to open a masked batch."""
    return size * ((domain_bits + 7) // 8)


def secure_sign(x: Shared, keys: CmpKeyPair, link: Link) -> Shared:
    """Shares of the bit ``[X < 0]`` (unscaled ring value 0 or 1).

    One opening round: both parties publish ``x_j + r_j (mod 2^n)``.
    """
    if x[0].shape != keys.shape:
        raise ShapeMismatch(f"keys cover shape {keys.shape}, input is {x[0].shape}")
    keys.consume()
    n = keys.domain_bits
    mod = np.uint64((1 << n) - 1) if n < 64 else np.uint64(0xFFFFFFFFFFFFFFFF)
    masked = [(x[j].values + keys.mask[j].values) & mod for j in (0, 1)]
    link.exchange(sign_open_bytes(x[0].size, n), "fss")
    x_c = (masked[0] + masked[1]) & mod
    return tuple(ShareVector(j, keys.eval_party(j, x_c), x[j].codec) for j in (0, 1))


def secure_relu_with_sign(x: Shared, keys: CmpKeyPair, triple: BeaverTriple, link: Link) -> tuple[Shared, Shared]:
    """ReLU plus the sign-bit shares it was computed from."""
    b = secure_sign(x, keys, link)
    keep = (b[0].with_values(np.uint64(1) - b[0].values), b[1].with_values(np.uint64(0) - b[1].values))
    # X times an unscaled bit needs no rescaling, so the product is exact
    return mul_shares(x, keep, triple, link, rescale=False), b


def secure_relu(x: Shared, keys: CmpKeyPair, triple: BeaverTriple, link: Link) -> Shared:
    """Shares of ``max(0, X)``."""
    return secure_relu_with_sign(x, keys, triple, link)[0]


def cmp_key_bytes(size: int, domain_bits: int, backend: str = "dcf") -> int:
    """Offline bytes per party for ``size`` sign gates (matches :meth:`CmpKeyPair.offline_bytes_per_party`)."""
    if backend == "table":
        return 1 + 8 * size + 8 + 8 * size
    bits = domain_bits - 1
    # header, root seeds, per-level (seed, value, two t-bits), final word, msb share, mask share
    return 2 + size * (16 + bits * (16 + 8 + 1 + 1) + 8 + 8 + 8)
