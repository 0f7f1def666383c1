from __future__ import annotations

import pytest

from fusefl.netsim import (
    SWEEP_COLUMNS,
    ComputeModel,
    LinkModel,
    RoundReport,
    charge_transcript,
    reports_to_csv,
    rows_to_csv,
    scaling_sweep,
    sweep_rows,
    upload_stats,
)
from fusefl.neural import TrainConfig, make_blobs, partition_uniform
from fusefl.protocol import SchemeConfig
from fusefl.transcript import C2C, C2S, OFFLINE, S2C, Transcript

LINK = LinkModel(100.0, 100.0, session_setup=0.0)


def _round(scale=1):
    tr = Transcript()
    tr.record("C0", "C1", C2C, 100 * scale, "beaver", "train", "g0")
    tr.record("C1", "C0", C2C, 100 * scale, "beaver", "train", "g0")
    tr.record("C2", "C3", C2C, 100 * scale, "beaver", "train", "g1")
    tr.record("C0", "S1", C2S, 50 * scale, "model", "upload")
    tr.record("C2", "S1", C2S, 50 * scale, "model", "upload")
    tr.record("dealer", "C0", OFFLINE, 999, "triple", "offline", "g0")
    return tr


def test_empty_transcript():
    r = charge_transcript(Transcript(), LINK)
    assert (r.bytes_c2c, r.bytes_s2c, r.bytes_c2s, r.bytes_offline) == (0, 0, 0, 0)
    assert r.latency_critical_path == 0.0


def test_bytes_come_from_messages():
    r = charge_transcript(_round(), LINK)
    assert (r.bytes_c2c, r.bytes_c2s, r.bytes_s2c, r.bytes_offline) == (300, 100, 0, 999)


def test_stage_model():
    r = charge_transcript(_round(), LINK)
    # train: C0 and C1 each move 200 bytes; upload: S1 receives 100
    assert r.latency_c2c == pytest.approx(2.0)
    assert r.latency_server == pytest.approx(1.0)
    assert r.latency_critical_path == pytest.approx(3.0)


def test_linearity():
    a, b = charge_transcript(_round(1), LINK), charge_transcript(_round(2), LINK)
    assert b.bytes_c2c == 2 * a.bytes_c2c and b.bytes_c2s == 2 * a.bytes_c2s
    assert b.latency_critical_path == pytest.approx(2 * a.latency_critical_path)


def test_shared_medium_and_serialized_servers():
    shared = charge_transcript(_round(), LinkModel(100.0, 100.0, c2c_parallel=False, session_setup=0.0))
    assert shared.latency_c2c == pytest.approx(3.0)
    tr = Transcript()
    tr.record("C0", "S1", C2S, 100, "model", "upload")
    tr.record("C1", "S2", C2S, 100, "model", "upload")
    assert charge_transcript(tr, LINK).latency_server == pytest.approx(1.0)
    ser = LinkModel(100.0, 100.0, session_setup=0.0, serialize_servers=True)
    assert charge_transcript(tr, ser).latency_server == pytest.approx(2.0)


def test_setup_charged_once():
    tr = _round()
    for g in range(5):
        tr.record("C0", "C1", C2C, 0, "session_setup", "setup", f"g{g}")
    assert charge_transcript(tr, LinkModel(100.0, 100.0, session_setup=0.5)).latency_setup == 0.5


def test_compute_makespan():
    tr = Transcript()
    for s in range(5):
        tr.record("A", "S1", C2S, 0, "session_setup", "setup", f"s{s}")
        tr.record("A", "S1", C2S, 1000, "beaver", "train", f"s{s}")
    cm = ComputeModel(seconds_per_byte=1e-3, seconds_per_round=0.0, aggregation_seconds_per_param=0.0)
    assert charge_transcript(tr, LINK, cm, workers=2).compute_time == pytest.approx(3.0)
    assert charge_transcript(tr, LINK, cm, workers=None).compute_time == pytest.approx(1.0)


def test_upload_stats():
    tr = Transcript()
    tr.record("C0", "C1", C2C, 7, "data_share")
    tr.record("C1", "C0", C2C, 7, "data_share")
    assert upload_stats(tr) == (14, 7, 14)


def test_link_validation():
    with pytest.raises(ValueError):
        LinkModel(0.0, 1.0)


def test_sweep_csv_golden(golden):
    base = SchemeConfig("ariann_fl", 2, train=TrainConfig(global_epochs=1), mode="meter")
    reports, ups = scaling_sweep(("ariann_fl", "fusefl_serial"), [4, 8], base,
                                 lambda n: partition_uniform(make_blobs(8 * n, seed=0), n))
    text = rows_to_csv(sweep_rows(reports, ups))
    assert text.splitlines()[0] == ",".join(SWEEP_COLUMNS)
    assert text == (golden / "sweep_small.csv").read_text()


def test_sweep_requires_sorted():
    with pytest.raises(ValueError):
        scaling_sweep(("ariann_fl",), [8, 4], SchemeConfig("ariann_fl", 2), lambda n: [])


def test_report_csv_columns():
    header = reports_to_csv([RoundReport()]).splitlines()[0].split(",")
    assert header[:3] == ["scheme", "n", "round"] and "loss" in header and "stored_models" not in header
