"""Deterministic cost model over transcripts.

All byte figures come from summing transcript messages. Latency follows a
stage model: a round runs the stages ``setup``, ``distribute``, ``train``
and ``upload`` one after another; within a stage every endpoint is a
half-duplex link whose busy time is (bytes in + bytes out) / bandwidth,
and the stage lasts as long as its busiest endpoint. Offline dealer
traffic is metered but never on the critical path.

Compute time is modelled, not measured, so reports are reproducible: a
session costs a fixed number of seconds per online byte and per round
trip, and sessions are list-scheduled onto the available workers.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields

from .transcript import C2C, C2S, OFFLINE, S2C, Transcript

STAGES = ("distribute", "train", "upload")
COMPUTE_TAGS = ("beaver", "fss", "train_meter")
DATA_TAG = "data_share"

MB = 10 ** 6

# published per-client figures used by the calibration profile
ANCHOR_DATA_BYTES = 450_000          # 0.45 MB dataset per client
ANCHOR_TRAIN_BYTES = 10_330_000      # 10.33 MB online traffic per client and epoch
ANCHOR_ARIANN_LATENCY = 1123.0       # seconds at 10,000 clients
ANCHOR_FUSEFL_LATENCY = 45.21
ANCHOR_CLIENTS = 10_000


@dataclass(frozen=True)
class LinkModel:
    """Bandwidths in bytes/s, times in seconds.

    Endpoints whose name starts with ``"S"`` or ``"W"`` (aggregation and
    training servers) use ``server_bandwidth``; everything else is a client.
    """

    server_bandwidth: float = 125e6
    client_bandwidth: float = 125e6
    c2c_parallel: bool = True
    base_rtt: float = 0.0
    session_setup: float = 0.030
    serialize_servers: bool = False
    count_distribution: bool = True

    def __post_init__(self):
        if self.server_bandwidth <= 0 or self.client_bandwidth <= 0:
            raise ValueError("bandwidths must be positive")
        if self.base_rtt < 0 or self.session_setup < 0:
            raise ValueError("latencies must be non-negative")

    def bandwidth(self, endpoint: str) -> float:
        return self.server_bandwidth if is_server(endpoint) else self.client_bandwidth


def is_server(endpoint: str) -> bool:
    return endpoint[:1] in ("S", "W")


@dataclass(frozen=True)
class ComputeModel:
    seconds_per_byte: float = 2e-8
    seconds_per_round: float = 1e-4
    aggregation_seconds_per_param: float = 1e-9


@dataclass
class RoundReport:
    scheme: str = ""
    n: int = 0
    round: int = 0
    bytes_c2c: int = 0
    bytes_s2c: int = 0
    bytes_c2s: int = 0
    bytes_offline: int = 0
    latency_setup: float = 0.0
    latency_c2c: float = 0.0
    latency_server: float = 0.0
    latency_critical_path: float = 0.0
    train_compute_time: float = 0.0
    compute_time: float = 0.0
    epoch_time: float = 0.0
    upload_total_bytes: int = 0
    upload_per_client_bytes: int = 0
    critical_path_bytes: int = 0
    concurrent_sessions: int = 0
    throughput: float = 0.0
    stored_models: dict = field(default_factory=dict)
    loss: float | None = None
    accuracy: float | None = None

    @property
    def bytes_server(self) -> int:
        return self.bytes_s2c + self.bytes_c2s

    @property
    def throughput_clients(self) -> int:
        """Training sessions that run at the same time."""
        return self.concurrent_sessions


def _stage_time(msgs, link: LinkModel) -> float:
    if not msgs:
        return 0.0
    load = defaultdict(int)
    for m in msgs:
        load[m.sender] += m.nbytes
        load[m.receiver] += m.nbytes
    times = {e: b / link.bandwidth(e) for e, b in load.items()}
    if link.serialize_servers:
        servers = [e for e in times if is_server(e)]
        if servers:
            merged = sum(times.pop(e) for e in servers)
            times["<servers>"] = merged
    if not link.c2c_parallel:
        # one shared medium: client-to-client traffic of all groups queues up
        c2c = sum(m.nbytes for m in msgs if m.channel == C2C)
        if c2c:
            times["<c2c>"] = c2c / link.client_bandwidth
    rtt = 0.0
    if link.base_rtt:
        rounds = defaultdict(int)
        for m in msgs:
            rounds[m.session] += 1
        rtt = link.base_rtt * max(rounds.values()) / 2
    return max(times.values()) + rtt


def _compute_makespan(durations: list[float], workers: int | None) -> float:
    """Greedy list scheduling of sessions (in order) on ``workers`` cores."""
    if not durations:
        return 0.0
    if workers is None or workers >= len(durations):
        return max(durations)
    free = [0.0] * workers
    for d in durations:
        i = min(range(workers), key=lambda k: (free[k], k))
        free[i] += d
    return max(free)


def session_compute_times(transcript: Transcript, compute: ComputeModel) -> dict[str, float]:
    """Modelled compute seconds per session, keyed in first-appearance order."""
    out: dict[str, float] = {}
    for m in transcript:
        if m.phase == "setup" and m.session not in out:
            out[m.session] = 0.0
        if m.tag in COMPUTE_TAGS:
            out[m.session] = out.get(m.session, 0.0) + \
                m.nbytes * compute.seconds_per_byte + compute.seconds_per_round / 2
    return out


def upload_stats(transcript: Transcript, tag: str = DATA_TAG) -> tuple[int, int, int]:
    """(total bytes, max bytes sent by one client, max endpoint load) of data uploads."""
    sent, load = defaultdict(int), defaultdict(int)
    total = 0
    for m in transcript:
        if m.tag == tag:
            total += m.nbytes
            sent[m.sender] += m.nbytes
            load[m.sender] += m.nbytes
            load[m.receiver] += m.nbytes
    per_client = max((b for e, b in sent.items() if not is_server(e)), default=0)
    return total, per_client, max(load.values(), default=0)


def charge_transcript(transcript: Transcript, link: LinkModel = LinkModel(),
                      compute: ComputeModel | None = None, workers: int | None = None,
                      stored_models: dict | None = None, scheme: str = "", n: int = 0,
                      round_index: int = 0) -> RoundReport:
    """Turn one round's transcript into a :class:`RoundReport`."""
    compute = compute or ComputeModel()
    by_channel = transcript.bytes_by_channel()
    report = RoundReport(scheme=scheme, n=n, round=round_index, bytes_c2c=by_channel[C2C],
                         bytes_s2c=by_channel[S2C], bytes_c2s=by_channel[C2S],
                         bytes_offline=by_channel[OFFLINE], stored_models=dict(stored_models or {}))
    msgs = [m for m in transcript if m.channel != OFFLINE]
    if any(m.phase == "setup" for m in msgs):
        report.latency_setup = link.session_setup
    stages = [s for s in STAGES if s != "distribute" or link.count_distribution]
    total = report.latency_setup
    for stage in stages:
        part = [m for m in msgs if m.phase == stage and m.nbytes]
        total += _stage_time(part, link)
        report.latency_c2c += _stage_time([m for m in part if m.channel == C2C], link)
        report.latency_server += _stage_time([m for m in part if m.channel in (S2C, C2S)], link)
    report.latency_critical_path = total

    sessions = session_compute_times(transcript, compute)
    report.concurrent_sessions = len(sessions) if workers is None else min(len(sessions), workers)
    train_time = _compute_makespan(list(sessions.values()), workers)
    received = defaultdict(int)
    for m in msgs:
        if m.phase == "upload":
            received[m.receiver] += m.nbytes
    agg_time = max(received.values(), default=0) / 8 * compute.aggregation_seconds_per_param
    report.train_compute_time = train_time
    report.compute_time = train_time + agg_time
    report.epoch_time = report.compute_time + report.latency_critical_path
    report.throughput = n / report.epoch_time if report.epoch_time > 0 else 0.0
    report.upload_total_bytes, report.upload_per_client_bytes, report.critical_path_bytes = \
        upload_stats(transcript)
    return report


# --- calibration profile ------------------------------------------------------------------

def paper_calibration_profile(critical_bytes_at_anchor: float, target: float = ANCHOR_ARIANN_LATENCY,
                              session_setup: float = 0.030) -> LinkModel:
    """Solve the shared bandwidth so the anchor run hits ``target`` seconds.

    ``critical_bytes_at_anchor`` is the AriaNN-FL critical path measured at
    unit bandwidth (seconds == bytes) minus its setup charge. Distribution is
    left off the critical path in this profile.
    """
    bw = critical_bytes_at_anchor / (target - session_setup)
    return LinkModel(server_bandwidth=bw, client_bandwidth=bw, c2c_parallel=True, base_rtt=0.0,
                     session_setup=session_setup, serialize_servers=False, count_distribution=False)


def unit_profile(session_setup: float = 0.030) -> LinkModel:
    """Bandwidth 1 byte/s so latencies read as byte counts."""
    return LinkModel(1.0, 1.0, True, 0.0, session_setup, False, False)


# --- memory census -----------------------------------------------------------------------------

CENSUS_ROLES = {"agg_server_1": "server1", "agg_server_2": "server2",
                "client_aggregator": "client_aggregator"}


def memory_census(parties) -> dict[str, int]:
    """Peak stored model instances keyed by table row.

    Rows are ``server1``, ``server2``, ``client_aggregator`` (when present)
    and ``clients_total`` summed over all clients.
    """
    out = {}
    for p in parties:
        if p.role in CENSUS_ROLES:
            out[CENSUS_ROLES[p.role]] = p.peak
    out["clients_total"] = sum(p.peak for p in parties if p.role == "client")
    return out


def expected_memory(scheme: str, n: int) -> dict[str, int]:
    """Closed-form instance counts for each scheme."""
    if scheme == "ariann_fl":
        return {"server1": n + 1, "client_aggregator": n + 1, "clients_total": n}
    half = n // 2 + 1
    clients = 3 * n if scheme == "fusefl_parallel" else n
    return {"server1": half, "server2": half, "clients_total": clients}


# --- sweeps and CSV ------------------------------------------------------------------------------

SWEEP_COLUMNS = ("scheme", "n", "bytes_c2c", "bytes_s2c", "bytes_c2s", "bytes_offline",
                 "upload_bytes_per_server", "latency_c2c", "latency_server", "latency_s",
                 "compute_s", "epoch_s", "concurrent_sessions", "throughput",
                 "stored_models_server1", "stored_models_server2", "stored_models_client_aggregator",
                 "stored_models_clients_total", "s2c_ratio")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def sweep_rows(reports: list[RoundReport], upload_per_server: list[int]) -> list[dict]:
    """CSV rows; ``s2c_ratio`` is AriaNN-FL upload bytes / FuSeFL per-server upload at equal n."""
    rows = []
    baseline = {r.n: u for r, u in zip(reports, upload_per_server) if r.scheme == "ariann_fl"}
    for r, up in zip(reports, upload_per_server):
        mem = r.stored_models
        ratio = ""
        if r.scheme.startswith("fusefl") and r.n in baseline and up:
            ratio = baseline[r.n] / up
        rows.append({
            "scheme": r.scheme, "n": r.n, "bytes_c2c": r.bytes_c2c, "bytes_s2c": r.bytes_s2c,
            "bytes_c2s": r.bytes_c2s, "bytes_offline": r.bytes_offline, "upload_bytes_per_server": up,
            "latency_c2c": r.latency_c2c, "latency_server": r.latency_server,
            "latency_s": r.latency_critical_path, "compute_s": r.compute_time, "epoch_s": r.epoch_time,
            "concurrent_sessions": r.concurrent_sessions, "throughput": r.throughput,
            "stored_models_server1": mem.get("server1", ""), "stored_models_server2": mem.get("server2", ""),
            "stored_models_client_aggregator": mem.get("client_aggregator", ""),
            "stored_models_clients_total": mem.get("clients_total", ""), "s2c_ratio": ratio,
        })
    return rows


def rows_to_csv(rows: list[dict], columns=SWEEP_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def report_fields() -> list[str]:
    return [f.name for f in fields(RoundReport) if f.name != "stored_models"]


def reports_to_csv(reports: list[RoundReport]) -> str:
    cols = report_fields()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in reports:
        d = asdict(r)
        w.writerow([_fmt(d[c]) for c in cols])
    return buf.getvalue()


def ceil_div(a: int, b: int) -> int:
    return math.ceil(a / b)


# --- sweeps over client counts ---------------------------------------------------------------

def metering_datasets(n: int, sample_bytes: int = ANCHOR_DATA_BYTES, sample_shape: tuple = (784,)):
    """``n`` empty client datasets that still report ``sample_bytes`` of data."""
    import numpy as np

    from .neural import Dataset

    return [Dataset(np.zeros((0, *sample_shape)), np.zeros(0, dtype=np.int64), sample_bytes=sample_bytes)
            for _ in range(n)]


def scaling_sweep(schemes, n_list, base, make_data) -> tuple[list[RoundReport], list[int]]:
    """One run per ``(scheme, n)``; returns the first-round reports and per-server uploads.

    ``base`` is a ``SchemeConfig`` whose scheme and client count are
    replaced per run; ``make_data(n)`` supplies the client datasets.
    """
    from dataclasses import replace

    from .protocol import run_scheme, upload_bytes_per_server

    if list(n_list) != sorted(n_list):
        raise ValueError("n_list must be sorted ascending")
    reports, uploads = [], []
    for scheme in schemes:
        for n in n_list:
            result = run_scheme(replace(base, scheme=scheme, n_clients=n), make_data(n))
            reports.append(result.reports[0])
            uploads.append(upload_bytes_per_server(result))
    return reports, uploads


def paper_calibration(n_list=(100, 1_000, 10_000), anchor_n: int = ANCHOR_CLIENTS,
                      network: str = "network1", session_setup: float = 0.030):
    """Calibrate on AriaNN-FL at ``anchor_n`` and meter FuSeFL-Serial across ``n_list``.

    Returns ``(link, ariann_report, fusefl_reports)`` with the reports
    charged under the solved link profile.
    """
    from .neural import TrainConfig
    from .protocol import SchemeConfig, run_scheme

    def meter(scheme, n, link):
        cfg = SchemeConfig(scheme, n, network=network, train=TrainConfig(global_epochs=1), mode="meter",
                           link=link, train_bytes_per_pass=ANCHOR_TRAIN_BYTES)
        return run_scheme(cfg, metering_datasets(n)).reports[0]

    unit = meter("ariann_fl", anchor_n, unit_profile(session_setup))
    link = paper_calibration_profile(unit.latency_critical_path - unit.latency_setup,
                                     session_setup=session_setup)
    ariann = meter("ariann_fl", anchor_n, link)
    return link, ariann, [meter("fusefl_serial", n, link) for n in n_list]
