from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fusefl import sharing as sh
from fusefl.errors import DealerExhausted, PartyMismatch, ShapeMismatch, TripleReuse
from fusefl.ring import FixedPointCodec, to_signed
from fusefl.transcript import C2C, OFFLINE, Link, Transcript

codec = FixedPointCodec()


def _link():
    return Link(Transcript(), ("A", "B"))


def test_share_reconstruct_example():
    rng = np.random.default_rng(1)
    pair = sh.share_real(np.array([1.5, -2.25]), rng)
    assert sh.reconstruct_real(pair).tolist() == [1.5, -2.25]


def test_single_share_looks_uniform():
    rng = np.random.default_rng(2)
    s0, _ = sh.share(np.zeros(20000, dtype=np.uint64), rng)
    top = (s0.values >> np.uint64(63)).mean()
    assert abs(top - 0.5) < 0.02


@given(st.lists(st.floats(-1000, 1000), min_size=1, max_size=6), st.integers(0, 2**32))
def test_linear_ops_exact(xs, seed):
    rng = np.random.default_rng(seed)
    x = np.array(xs)
    a, b = sh.share_real(x, rng), sh.share_real(-x, rng)
    assert np.array_equal(sh.reconstruct_real(sh.add(a, b)), np.zeros_like(x))
    assert np.array_equal(sh.reconstruct_real(sh.sub(a, b)), 2 * codec.quantize(x))
    assert np.array_equal(sh.reconstruct_real(sh.neg(a)), -codec.quantize(x))
    assert np.array_equal(sh.reconstruct_real(sh.scale_int(a, 3)), 3 * codec.quantize(x))


def test_beaver_mul_example():
    rng = np.random.default_rng(3)
    dealer = sh.TripleDealer(4)
    x, y = sh.share_real([2.0], rng), sh.share_real([3.5], rng)
    z = sh.mul_shares(x, y, dealer.mul_triple((1,)), _link())
    assert abs(sh.reconstruct_real(z)[0] - 7.0) <= codec.ulp


@settings(max_examples=50)
@given(st.integers(0, 2**32))
def test_mul_without_rescale_is_exact_in_ring(seed):
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, 2**64, 4, dtype=np.uint64)
    ys = rng.integers(0, 2**64, 4, dtype=np.uint64)
    z = sh.mul_shares(sh.share(xs, rng), sh.share(ys, rng), sh.TripleDealer(seed).mul_triple((4,)), _link(),
                      rescale=False)
    assert [int(v) for v in sh.reconstruct(*z)] == [oracles.ring_mul(int(a), int(b)) for a, b in zip(xs, ys)]


def test_matmul_error_below_one_ulp():
    rng = np.random.default_rng(5)
    a, b = codec.quantize(rng.uniform(-4, 4, (3, 6))), codec.quantize(rng.uniform(-4, 4, (6, 2)))
    z = sh.matmul_shares(sh.share_real(a, rng), sh.share_real(b, rng),
                         sh.TripleDealer(6).matmul_triple((3, 6), (6, 2)), _link())
    assert np.max(np.abs(sh.reconstruct_real(z) - a @ b)) < codec.ulp


def test_truncation_is_unbiased():
    rng = np.random.default_rng(7)
    raw = np.full(40000, 5 * 2**16 + 2**14, dtype=np.uint64)  # 5.25 units before the shift
    t = sh.truncate_shares(sh.share(raw, rng), 16)
    vals = to_signed(sh.reconstruct(*t))
    assert set(np.unique(vals)) <= {5, 6}
    assert abs(vals.mean() - 5.25) < 0.01


def test_mul_records_one_exchange():
    link = _link()
    rng = np.random.default_rng(8)
    dealer = sh.TripleDealer(9)
    t = dealer.mul_triple((5,), link)
    sh.mul_shares(sh.share_real(np.ones(5), rng), sh.share_real(np.ones(5), rng), t, link)
    tr = link.transcript
    assert tr.count(C2C) == 2 and tr.total_bytes(C2C) == 2 * sh.mul_cost(5, 5)
    assert tr.total_bytes(OFFLINE) == 2 * 3 * 5 * 8


def test_triple_reuse_rejected():
    rng = np.random.default_rng(0)
    t = sh.TripleDealer(0).mul_triple((1,))
    x = sh.share_real([1.0], rng)
    sh.mul_shares(x, x, t, _link())
    with pytest.raises(TripleReuse):
        sh.mul_shares(x, x, t, _link())


def test_dealer_budget():
    dealer = sh.TripleDealer(0, budget=1)
    dealer.mul_triple((1,))
    with pytest.raises(DealerExhausted):
        dealer.mul_triple((1,))


def test_dealer_is_deterministic():
    a = sh.TripleDealer(11).mul_triple((3,))
    b = sh.TripleDealer(11).mul_triple((3,))
    assert np.array_equal(a.c[0].values, b.c[0].values)


def test_mismatched_halves_rejected():
    rng = np.random.default_rng(0)
    x = sh.share_real([1.0], rng)
    with pytest.raises(PartyMismatch):
        sh.reconstruct(x[0], x[0])
    with pytest.raises(ShapeMismatch):
        sh.mul_shares(x, x, sh.TripleDealer(0).mul_triple((2,)), _link())


def test_rerandomize_keeps_secret():
    rng = np.random.default_rng(12)
    x = sh.share_real([0.5, -0.5], rng)
    y = sh.rerandomize(x, rng)
    assert np.array_equal(sh.reconstruct(*x), sh.reconstruct(*y))
    assert not np.array_equal(x[0].values, y[0].values)
