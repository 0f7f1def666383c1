from __future__ import annotations

import numpy as np
import pytest

import oracles
from fusefl import sharing as sh
from fusefl.errors import KeyReuse, ShapeMismatch
from fusefl.fss import CmpKeyDealer, cmp_key_bytes, dcf_eval, dcf_gen, keygen_cmp, secure_relu, secure_sign
from fusefl.ring import FixedPointCodec, as_ring
from fusefl.transcript import C2C, OFFLINE, Link, Transcript


def _link():
    return Link(Transcript(), ("A", "B"))


def test_dcf_exhaustive_small_domain():
    rng = np.random.default_rng(0)
    bits = 8
    alphas = np.array([0, 1, 77, 128, 255], dtype=np.uint64)
    betas = np.array([5, 1, 2**64 - 1, 9, 3], dtype=np.uint64)
    k0, k1 = dcf_gen(alphas, betas, bits, rng)
    for x in range(2**bits):
        xs = np.full(len(alphas), x, dtype=np.uint64)
        got = dcf_eval(k0, xs) + dcf_eval(k1, xs)
        expect = [int(b) if x < int(a) else 0 for a, b in zip(alphas, betas)]
        assert [int(v) for v in got] == expect


@pytest.mark.parametrize("backend", ["dcf", "table"])
def test_single_key_over_full_16_bit_domain(backend):
    rng = np.random.default_rng(1)
    key = keygen_cmp(rng, 16, (1,), backend=backend)
    r = int(key.mask_value()[0])
    many = key.repeat(2**16)
    xs = np.arange(2**16, dtype=np.uint64)
    got = many.eval_party(0, xs) + many.eval_party(1, xs)
    # opened value is x + r, so the gate reports the sign of x = opened - r
    expect = np.array([oracles.sign_bit((x - r) % 2**16, 16) for x in range(2**16)], dtype=np.uint64)
    assert np.array_equal(got, expect)


def test_secure_sign_examples():
    rng = np.random.default_rng(2)
    x = sh.share_real([-3.0, 0.0, 2.5, -1e-4], rng)
    keys = CmpKeyDealer(3).issue((4,))
    bits = sh.reconstruct(*secure_sign(x, keys, _link()))
    assert bits.tolist() == [1, 0, 0, 1]


def test_secure_relu():
    rng = np.random.default_rng(4)
    vals = np.array([-2.0, -0.5, 0.0, 0.75, 3.0])
    x = sh.share_real(vals, rng)
    y = secure_relu(x, CmpKeyDealer(5).issue((5,)), sh.TripleDealer(6).mul_triple((5,)), _link())
    assert sh.reconstruct_real(y).tolist() == np.maximum(vals, 0).tolist()


def test_key_single_use():
    rng = np.random.default_rng(7)
    x = sh.share_real([1.0], rng)
    keys = CmpKeyDealer(8).issue((1,))
    secure_sign(x, keys, _link())
    with pytest.raises(KeyReuse):
        secure_sign(x, keys, _link())


def test_key_shape_checked():
    rng = np.random.default_rng(9)
    with pytest.raises(ShapeMismatch):
        secure_sign(sh.share_real([1.0, 2.0], rng), CmpKeyDealer(0).issue((3,)), _link())


@pytest.mark.parametrize("backend", ["dcf", "table"])
@pytest.mark.parametrize("bits", [16, 32])
def test_key_size_formula(backend, bits):
    keys = CmpKeyDealer(0, bits, backend).issue((7,))
    assert keys.offline_bytes_per_party() == cmp_key_bytes(7, bits, backend)


def test_sign_traffic():
    link = _link()
    rng = np.random.default_rng(10)
    dealer = CmpKeyDealer(11)
    keys = dealer.issue((6,), link)
    secure_sign(sh.share_real(np.ones(6), rng), keys, link)
    tr = link.transcript
    assert tr.total_bytes(C2C) == 2 * 6 * 4
    assert tr.total_bytes(OFFLINE) == 2 * cmp_key_bytes(6, 32)


def test_backends_agree():
    rng = np.random.default_rng(12)
    vals = rng.uniform(-100, 100, 500)
    out = []
    for backend in ("dcf", "table"):
        x = sh.share_real(vals, np.random.default_rng(13))
        out.append(sh.reconstruct(*secure_sign(x, CmpKeyDealer(14, 32, backend).issue((500,)), _link())))
    assert np.array_equal(out[0], out[1])
    assert np.array_equal(out[0], as_ring((vals < 0).astype(np.int64)))


def test_codec_respected():
    codec = FixedPointCodec(12)
    rng = np.random.default_rng(15)
    x = sh.share_real([-1.0, 1.0], rng, codec)
    bits = sh.reconstruct(*secure_sign(x, CmpKeyDealer(0, 32, "dcf", codec).issue((2,)), _link()))
    assert bits.tolist() == [1, 0]
