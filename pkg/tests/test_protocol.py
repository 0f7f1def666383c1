from __future__ import annotations

import numpy as np
import pytest

from fusefl import sharing as sh
from fusefl.errors import ArchMismatch, OddClientCount
from fusefl.grouping import RiskMatrix
from fusefl.neural import TrainConfig, build_network, fedavg_plaintext, make_blobs, partition_uniform, \
    train_plaintext, train_sequential
from fusefl.netsim import expected_memory, metering_datasets
from fusefl.protocol import (
    SchemeConfig,
    run_ariann_fl,
    run_fusefl_parallel,
    run_fusefl_serial,
    run_scheme,
    run_wwfl_like,
    secure_fedavg,
    upload_bytes_per_server,
)
from fusefl.transcript import C2C, C2S, S2C

TC = TrainConfig(0.05, 0.9, 1, 2, 8)


def _data(n, per=16, seed=1):
    return partition_uniform(make_blobs(n * per, seed=seed), n)


def test_parallel_twin_is_fedavg():
    data, m0 = _data(4), build_network("tiny")
    res = run_fusefl_parallel(SchemeConfig("fusefl_parallel", 4, train=TC), data, model=m0)
    g = m0
    for _ in range(2):
        g = fedavg_plaintext([train_plaintext(g, d, TC) for d in data], [len(d) for d in data])
    assert np.array_equal(res.model.flat(), g.flat())


def test_serial_follows_risk_pairing():
    data, m0 = _data(4), build_network("tiny")
    risk = RiskMatrix(np.array([[0, .9, .1, .5], [.9, 0, .5, .1], [.1, .5, 0, .9], [.5, .1, .9, 0]]))
    res = run_fusefl_serial(SchemeConfig("fusefl_serial", 4, train=TC), data, risk, model=m0)
    assert [a.pairs for a in res.assignments] == [[(0, 2), (1, 3)]] * 2
    g = m0
    for _ in range(2):
        g = fedavg_plaintext([train_sequential(g, [data[0], data[2]], TC), train_sequential(g, [data[1], data[3]], TC)],
                             [32, 32])
    assert np.array_equal(res.model.flat(), g.flat())


def test_secure_round_close_to_twin():
    data, m0 = _data(4), build_network("tiny")
    cfg = dict(train=TrainConfig(0.05, 0.9, 1, 1, 8), fss_backend="table")
    sec = run_fusefl_parallel(SchemeConfig("fusefl_parallel", 4, mode="secure", **cfg), data, model=m0)
    twin = run_fusefl_parallel(SchemeConfig("fusefl_parallel", 4, mode="twin", **cfg), data, model=m0)
    assert np.max(np.abs(sec.model.flat() - twin.model.flat())) < 2.0**-10
    assert sec.transcript.messages == twin.transcript.messages


def test_ariann_secure_round():
    data, m0 = _data(2), build_network("tiny")
    cfg = SchemeConfig("ariann_fl", 2, train=TrainConfig(0.05, 0.9, 1, 1, 8), mode="secure", fss_backend="table")
    res = run_ariann_fl(cfg, data, model=m0)
    g = fedavg_plaintext([train_plaintext(m0, d, cfg.train) for d in data], [16, 16])
    assert np.max(np.abs(res.model.flat() - g.flat())) < 2.0**-10


@pytest.mark.parametrize("scheme", ["fusefl_serial", "fusefl_parallel", "ariann_fl"])
def test_memory_census(scheme):
    res = run_scheme(SchemeConfig(scheme, 8, train=TC, mode="meter"), _data(8))
    assert res.reports[-1].stored_models == expected_memory(scheme, 8)
    assert all(p.stored_models == (1 if p.role != "client" else 0) for p in res.parties)


def test_channels():
    x = build_network("tiny").param_count * 8
    res = run_fusefl_serial(SchemeConfig("fusefl_serial", 4, train=TrainConfig(global_epochs=1), mode="meter"),
                            _data(4))
    ups = [m for m in res.transcript if m.phase == "upload"]
    assert {(m.sender, m.receiver) for m in ups} == {("C0", "S1"), ("C1", "S2"), ("C2", "S1"), ("C3", "S2")}
    assert all(m.channel == C2S and m.nbytes == x for m in ups)
    assert all(m.channel == C2C for m in res.transcript if m.phase == "train")
    res = run_ariann_fl(SchemeConfig("ariann_fl", 2, train=TrainConfig(global_epochs=1), mode="meter"), _data(2))
    train = [m for m in res.transcript if m.phase == "train" and m.tag == "train_meter"]
    assert {m.channel for m in train} == {C2S, S2C}


def test_upload_halving():
    for scheme in ("fusefl_serial", "fusefl_parallel"):
        base = run_scheme(SchemeConfig("ariann_fl", 6, train=TrainConfig(global_epochs=1), mode="meter"), _data(6))
        ours = run_scheme(SchemeConfig(scheme, 6, train=TrainConfig(global_epochs=1), mode="meter"), _data(6))
        assert upload_bytes_per_server(base) == 2 * upload_bytes_per_server(ours)


def test_wwfl_uploads():
    res = run_wwfl_like(SchemeConfig("wwfl_like", 20, mode="meter", train=TrainConfig(global_epochs=1)),
                        metering_datasets(20, 1000, (4,)))
    r = res.reports[0]
    assert (r.upload_total_bytes, r.upload_per_client_bytes, r.critical_path_bytes) == (40000, 2000, 10000)


def test_odd_rejected():
    with pytest.raises(OddClientCount):
        SchemeConfig("fusefl_serial", 5)


def test_secure_fedavg_weights():
    rng = np.random.default_rng(0)
    a, b = sh.share_real(np.array([1.0, 2.0]), rng), sh.share_real(np.array([3.0, 6.0]), rng)
    halves = [secure_fedavg([[a[j]], [b[j]]], [1, 3]) for j in (0, 1)]
    avg = sh.reconstruct_real((halves[0][0], halves[1][0]))
    assert np.max(np.abs(avg - np.array([2.5, 5.0]))) <= 2 * 2.0**-16
    with pytest.raises(ArchMismatch):
        secure_fedavg([[a[0]], [sh.share_real(np.zeros(3), rng)[0]]], [1, 1])


def test_deterministic_runs():
    cfg = SchemeConfig("fusefl_parallel", 4, train=TrainConfig(0.05, 0.9, 1, 1, 8), mode="secure",
                       fss_backend="table", seed=5)
    a = run_scheme(cfg, _data(4))
    b = run_scheme(cfg, _data(4))
    assert np.array_equal(a.model.flat(), b.model.flat())
