"""End-to-end runs of the federated schemes.

``fusefl_serial`` trains one model per client pair on both members' data
in turn; ``fusefl_parallel`` trains one model per member concurrently and
averages the pair locally; ``ariann_fl`` pairs every client with a single
server that doubles as aggregator, while a designated client aggregator
(``CA``) gathers the clients' halves; ``wwfl_like`` meters a scheme that
offloads both data shares to per-cluster training servers.

Three execution modes share one message schedule:

* ``secure``: real shares, Beaver triples and FSS keys;
* ``twin``: plaintext float math, identical transcript;
* ``meter``: no math at all; training traffic is logged in aggregate.

In twin mode averages are kept as exact rationals until the model owner
reads the final model, so hierarchical averaging (pairs, then servers)
matches a flat FedAvg bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sharing as sh
from .errors import ArchMismatch, ConfigError, OddClientCount
from .fss import CmpKeyDealer
from .grouping import GroupAssignment, RiskMatrix, match, match_sequential, risk_update
from .neural import (
    Dataset,
    ExactAccumulator,
    ModelParams,
    TrainConfig,
    accuracy,
    build_network,
    evaluate_loss,
)
from .netsim import ComputeModel, LinkModel, RoundReport, charge_transcript, memory_census
from .ring import FixedPointCodec
from .secure_train import (
    meter_local,
    open_session,
    open_twin_session,
    plain_batches,
    share_dataset,
    shared_batches,
    train_local,
)
from .sharing import ShareVector, TripleDealer
from .transcript import C2C, C2S, S2C, Transcript

SCHEMES = ("fusefl_serial", "fusefl_parallel", "ariann_fl", "wwfl_like")
MODES = ("secure", "twin", "meter")
BYTES_PER_PARAM = 8


@dataclass
class Party:
    id: str
    role: str
    stored_models: int = 0
    peak: int = 0

    def hold(self, k: int = 1) -> None:
        self.stored_models += k
        self.peak = max(self.peak, self.stored_models)

    def release(self, k: int = 1) -> None:
        if k > self.stored_models:
            raise RuntimeError(f"{self.id} releases more model buffers than it holds")
        self.stored_models -= k


@dataclass
class SchemeConfig:
    scheme: str
    n_clients: int
    network: str = "tiny"
    input_shape: tuple | None = None
    n_classes: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    mode: str = "twin"
    cores_per_server: int = 16
    frac_bits: int = 16
    domain_bits: int = 32
    fss_backend: str = "dcf"
    matcher: str = "exact"
    repeat_penalty: float = 0.0
    exact_cap: int = 64
    link: LinkModel = field(default_factory=LinkModel)
    compute: ComputeModel = field(default_factory=ComputeModel)
    train_bytes_per_pass: int | None = None
    wwfl_cluster_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be positive")
        if self.scheme.startswith("fusefl") and self.n_clients % 2:
            raise OddClientCount(f"odd client count {self.n_clients}: FuSeFL needs client pairs")
        if self.cores_per_server < 1:
            raise ConfigError("cores_per_server must be positive")

    @property
    def codec(self) -> FixedPointCodec:
        return FixedPointCodec(self.frac_bits)


@dataclass
class RunResult:
    model: ModelParams | None
    reports: list[RoundReport]
    transcript: Transcript
    parties: list[Party]
    assignments: list[GroupAssignment] = field(default_factory=list)

    def __iter__(self):
        yield self.model
        yield self.reports


def _rng(cfg: SchemeConfig, *tags: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *tags])


def _initial_model(cfg: SchemeConfig, data: list[Dataset], model: ModelParams | None) -> ModelParams:
    if model is not None:
        return model
    shape = cfg.input_shape or (tuple(data[0].samples.shape[1:]) if len(data[0]) else None)
    return build_network(cfg.network, shape, seed=cfg.seed, n_classes=cfg.n_classes)


def _check_data(cfg: SchemeConfig, data: list[Dataset]) -> None:
    if len(data) != cfg.n_clients:
        raise ConfigError(f"expected {cfg.n_clients} client datasets, got {len(data)}")


# --- global model state ----------------------------------------------------------------------

@dataclass
class GlobalModel:
    """The global model as held by its two custodians.

    ``shares`` (secure) is a list of pairs aligned with ``template.arrays()``:
    custodian 0 keeps the party-0 halves, custodian 1 the party-1 halves.
    ``acc`` (twin) is an exact rational average, ``plain`` its rounded value.
    """

    template: ModelParams
    shares: list | None = None
    acc: ExactAccumulator | None = None
    plain: ModelParams | None = None

    def reveal(self) -> ModelParams:
        """Model-owner reconstruction ``GM = [GM]_0 + [GM]_1``."""
        if self.shares is not None:
            return self.template.with_arrays([sh.reconstruct_real(s) for s in self.shares])
        return self.plain


def _share_global(cfg: SchemeConfig, model: ModelParams) -> GlobalModel:
    if cfg.mode == "secure":
        rng = _rng(cfg, 7)
        return GlobalModel(model, shares=[sh.share_real(a, rng, cfg.codec) for a in model.arrays()])
    return GlobalModel(model, plain=model)


def _rerandomize(cfg: SchemeConfig, gm: GlobalModel, round_index: int) -> None:
    # the custodians share a PRG seed, so refreshing costs no traffic
    if gm.shares is not None:
        rng = _rng(cfg, 11, round_index)
        gm.shares = [sh.rerandomize(s, rng) for s in gm.shares]


def distribute_model(gm: GlobalModel, assignment: GroupAssignment, transcript: Transcript,
                     servers: tuple[str, str] = ("S1", "S2")) -> list[tuple[tuple[int, int], object]]:
    """Each server sends its half of the global model to one member of every pair.

    Returns ``(pair, weights)`` per group, where ``weights`` is the shared
    model (secure) or the plaintext model (twin / meter).
    """
    nbytes = gm.template.param_count * BYTES_PER_PARAM
    out = []
    for k, l in assignment.pairs:
        transcript.record(servers[0], f"C{k}", S2C, nbytes, "model", "distribute")
        transcript.record(servers[1], f"C{l}", S2C, nbytes, "model", "distribute")
        out.append(((k, l), list(gm.shares) if gm.shares is not None else gm.plain))
    return out


def secure_fedavg(server_shares: list[list[ShareVector]], weights: list[int]) -> list[ShareVector]:
    """One server's local weighted average of its halves.

    ``server_shares[k]`` is the server's half of input model ``k`` (a list
    of per-tensor :class:`ShareVector`). The public weights ``n_k / n`` are
    applied as fixed-point constants followed by a single truncation.
    """
    if not server_shares:
        raise ValueError("nothing to aggregate")
    shapes = [s.shape for s in server_shares[0]]
    for model in server_shares[1:]:
        if [s.shape for s in model] != shapes:
            raise ArchMismatch("cannot average models of different architectures")
    total = sum(weights)
    if total <= 0:
        raise ValueError("weights must sum to a positive number")
    codec = server_shares[0][0].codec
    coeffs = [codec.encode_int(w / total) for w in weights]
    out = []
    for t in range(len(shapes)):
        acc = sum((model[t].values * np.uint64(c) for model, c in zip(server_shares, coeffs)),
                  np.zeros(shapes[t], dtype=np.uint64))
        out.append(sh.truncate_share(server_shares[0][t].with_values(acc), codec.frac_bits))
    return out


def _secure_average(models: list[list], weights: list[int]) -> list:
    """Average shared models; each custodian works on its own halves only."""
    halves = [secure_fedavg([[pair[j] for pair in m] for m in models], weights) for j in (0, 1)]
    return [(a, b) for a, b in zip(*halves)]


# --- per-pair training ------------------------------------------------------------------------

def _open(cfg, template, start, endpoints, transcript, name, rng_tags, *, record_setup=True,
          channel=C2C, reverse=None):
    if cfg.mode == "secure":
        dealer = TripleDealer(int(_rng(cfg, 13, *rng_tags).integers(1 << 62)), cfg.codec)
        keys = CmpKeyDealer(int(_rng(cfg, 17, *rng_tags).integers(1 << 62)), cfg.domain_bits,
                            cfg.fss_backend, cfg.codec)
        return open_session(start, template, endpoints, dealer, keys, transcript, name,
                            cfg.link.session_setup, channel=channel, reverse_channel=reverse,
                            record_setup=record_setup)
    return open_twin_session(start, endpoints, transcript, name, cfg.domain_bits, cfg.fss_backend,
                             cfg.link.session_setup, cfg.codec, channel=channel,
                             reverse_channel=reverse, record_setup=record_setup,
                             metering=cfg.mode == "meter")


def _train_on(cfg: SchemeConfig, sess, data: Dataset, n_classes: int, rng_tags) -> None:
    if len(data) == 0 and cfg.mode != "meter":
        return
    if cfg.mode == "meter":
        meter_local(sess, len(data), cfg.train, cfg.train_bytes_per_pass)
    elif cfg.mode == "twin":
        train_local(sess, plain_batches(data, cfg.train.batch_size), cfg.train)
    else:
        x, y = share_dataset(data, n_classes, _rng(cfg, 19, *rng_tags), cfg.codec)
        train_local(sess, shared_batches(x, y, cfg.train.batch_size), cfg.train)


def _session_result(cfg: SchemeConfig, sess):
    """Trained weights in the representation the aggregation layer expects."""
    if cfg.mode == "secure":
        return sess.weights
    if cfg.mode == "meter":
        return sess.template
    return sess.template.with_arrays(sess.weights)


def _share_data(transcript: Transcript, sender: str, receiver: str, data: Dataset, channel: str,
                session: str) -> None:
    transcript.record(sender, receiver, channel, data.sample_bytes, "data_share", "train", session)


# --- FuSeFL -----------------------------------------------------------------------------------

def _fusefl(cfg: SchemeConfig, data: list[Dataset], risk: RiskMatrix | None,
            model: ModelParams | None, eval_data: Dataset | None, parallel: bool) -> RunResult:
    _check_data(cfg, data)
    n = cfg.n_clients
    template = _initial_model(cfg, data, model)
    n_classes = template.output_dim
    servers = (Party("S1", "agg_server_1"), Party("S2", "agg_server_2"))
    clients = [Party(f"C{i}", "client") for i in range(n)]
    parties = list(servers) + clients
    gm = _share_global(cfg, template)
    for s in servers:
        s.hold()
    full = Transcript()
    reports, history = [], []
    for r in range(cfg.train.global_epochs):
        tr = Transcript()
        if risk is None:
            assignment = match_sequential(n, r)
        else:
            assignment = match(risk_update(history, risk, cfg.repeat_penalty), cfg.matcher, r, cfg.exact_cap)
        history.append(assignment)
        _rerandomize(cfg, gm, r)
        received = {"S1": [], "S2": []}
        group_models, group_weights = [], []
        for g, ((k, l), start) in enumerate(distribute_model(gm, assignment, tr)):
            ck, cl = clients[k], clients[l]
            ck.hold()
            cl.hold()
            name = f"r{r}g{g}"
            _share_data(tr, ck.id, cl.id, data[k], C2C, name)
            _share_data(tr, cl.id, ck.id, data[l], C2C, name)
            endpoints = (ck.id, cl.id)
            if not parallel:
                sess = _open(cfg, template, start, endpoints, tr, name, (r, g))
                _train_on(cfg, sess, data[k], n_classes, (r, g, 0))
                _train_on(cfg, sess, data[l], n_classes, (r, g, 1))
                local = _session_result(cfg, sess)
                weight = len(data[k]) + len(data[l])
                if cfg.mode == "twin":
                    local = _exact(template, local, weight)
            else:
                # each member keeps a second instance of the received model
                ck.hold()
                cl.hold()
                sa = _open(cfg, template, start, endpoints, tr, name + "a", (r, g, 0))
                sb = _open(cfg, template, start, endpoints, tr, name + "b", (r, g, 1), record_setup=False)
                _train_on(cfg, sa, data[k], n_classes, (r, g, 0))
                _train_on(cfg, sb, data[l], n_classes, (r, g, 1))
                wk, wl = len(data[k]), len(data[l])
                weight = wk + wl
                ck.hold()
                cl.hold()
                if cfg.mode == "secure":
                    local = _secure_average([sa.weights, sb.weights], [wk, wl])
                elif cfg.mode == "twin":
                    local = ExactAccumulator(template)
                    local.add(_session_result(cfg, sa), wk)
                    local.add(_session_result(cfg, sb), wl)
                else:
                    local = template
                ck.release(2)
                cl.release(2)
            # upload: each member sends its half to its own server
            nbytes = template.param_count * BYTES_PER_PARAM
            tr.record(ck.id, "S1", C2S, nbytes, "model", "upload")
            tr.record(cl.id, "S2", C2S, nbytes, "model", "upload")
            servers[0].hold()
            servers[1].hold()
            ck.release()
            cl.release()
            group_models.append(local)
            group_weights.append(weight)
        gm = _aggregate(cfg, gm, group_models, group_weights)
        for s in servers:
            s.release(len(group_models))
        full.extend(tr)
        reports.append(_report(cfg, tr, parties, r, gm, eval_data, data, workers=None))
    return RunResult(gm.reveal() if cfg.mode != "meter" else None, reports, full, parties, history)


def _exact(template: ModelParams, model: ModelParams, weight: int) -> ExactAccumulator:
    acc = ExactAccumulator(template)
    acc.add(model, weight)
    return acc


def _aggregate(cfg: SchemeConfig, gm: GlobalModel, models: list, weights: list[int]) -> GlobalModel:
    if cfg.mode == "secure":
        return GlobalModel(gm.template, shares=_secure_average(models, weights))
    if cfg.mode == "twin":
        acc = ExactAccumulator(gm.template)
        for m in models:
            acc.merge(m)
        return GlobalModel(gm.template, acc=acc, plain=acc.mean())
    return gm


def _report(cfg, tr, parties, r, gm, eval_data, data, workers) -> RoundReport:
    rep = charge_transcript(tr, cfg.link, cfg.compute, workers, memory_census(parties),
                            cfg.scheme, cfg.n_clients, r)
    if cfg.mode != "meter":
        ev = eval_data if eval_data is not None else Dataset.concat(data)
        if len(ev):
            model = gm.reveal()
            rep.loss = evaluate_loss(model, ev)
            rep.accuracy = accuracy(model, ev)
    return rep


def run_fusefl_serial(cfg: SchemeConfig, data: list[Dataset], risk: RiskMatrix | None = None,
                      model: ModelParams | None = None, eval_data: Dataset | None = None) -> RunResult:
    """One shared model per pair, trained on ``D_k`` then ``D_l``."""
    return _fusefl(cfg, data, risk, model, eval_data, parallel=False)


def run_fusefl_parallel(cfg: SchemeConfig, data: list[Dataset], risk: RiskMatrix | None = None,
                        model: ModelParams | None = None, eval_data: Dataset | None = None) -> RunResult:
    """Two shared models per pair trained concurrently, averaged inside the pair."""
    return _fusefl(cfg, data, risk, model, eval_data, parallel=True)


# --- AriaNN-FL --------------------------------------------------------------------------------

def run_ariann_fl(cfg: SchemeConfig, data: list[Dataset], model: ModelParams | None = None,
                  eval_data: Dataset | None = None) -> RunResult:
    """Server-assisted secure training, one client at a time per server core.

    Custodian 0 of the global model is the client aggregator ``CA``,
    custodian 1 the server ``S1``. Each round ``CA`` sends its half to every
    client, each client trains with the server, and the clients return
    their halves to ``CA`` for averaging while the server averages its own.
    """
    _check_data(cfg, data)
    n = cfg.n_clients
    template = _initial_model(cfg, data, model)
    n_classes = template.output_dim
    server, ca = Party("S1", "agg_server_1"), Party("CA", "client_aggregator")
    clients = [Party(f"C{i}", "client") for i in range(n)]
    parties = [server, ca] + clients
    gm = _share_global(cfg, template)
    server.hold()
    ca.hold()
    full, reports = Transcript(), []
    nbytes = template.param_count * BYTES_PER_PARAM
    for r in range(cfg.train.global_epochs):
        tr = Transcript()
        _rerandomize(cfg, gm, r)
        start = list(gm.shares) if gm.shares is not None else gm.plain
        locals_, weights = [], []
        for i, c in enumerate(clients):
            tr.record(ca.id, c.id, C2C, nbytes, "model", "distribute")
            c.hold()
            server.hold()
            name = f"r{r}c{i}"
            _share_data(tr, c.id, server.id, data[i], C2S, name)
            sess = _open(cfg, template, start, (c.id, server.id), tr, name, (r, i), channel=C2S, reverse=S2C)
            _train_on(cfg, sess, data[i], n_classes, (r, i))
            locals_.append(_session_result(cfg, sess))
            weights.append(len(data[i]))
        for c in clients:
            tr.record(c.id, ca.id, C2C, nbytes, "model", "upload")
            ca.hold()
        if cfg.mode == "twin":
            locals_ = [_exact(template, m, w) for m, w in zip(locals_, weights)]
        gm = _aggregate(cfg, gm, locals_, weights)
        server.release(n)
        ca.release(n)
        full.extend(tr)
        reports.append(_report(cfg, tr, parties, r, gm, eval_data, data, workers=cfg.cores_per_server))
        for c in clients:
            c.release()
    return RunResult(gm.reveal() if cfg.mode != "meter" else None, reports, full, parties)


# --- WW-FL-like offloading --------------------------------------------------------------------

def run_wwfl_like(cfg: SchemeConfig, data: list[Dataset], model: ModelParams | None = None) -> RunResult:
    """Metering-only run: clients upload both data shares to their cluster's two servers."""
    _check_data(cfg, data)
    template = _initial_model(cfg, data, model)
    size = cfg.wwfl_cluster_size
    n_clusters = -(-cfg.n_clients // size)
    parties = [Party("S1", "agg_server_1"), Party("S2", "agg_server_2")]
    parties += [Party(f"W{c}{s}", "training_server") for c in range(n_clusters) for s in "ab"]
    parties += [Party(f"C{i}", "client") for i in range(cfg.n_clients)]
    full, reports = Transcript(), []
    nbytes = template.param_count * BYTES_PER_PARAM
    for r in range(cfg.train.global_epochs):
        tr = Transcript()
        for i, d in enumerate(data):
            c = i // size
            for s in "ab":
                tr.record(f"C{i}", f"W{c}{s}", C2S, d.sample_bytes, "data_share", "train", f"r{r}w{c}")
        for c in range(n_clusters):
            tr.record(f"W{c}a", "S1", C2S, nbytes, "model", "upload")
            tr.record(f"W{c}b", "S2", C2S, nbytes, "model", "upload")
        full.extend(tr)
        reports.append(charge_transcript(tr, cfg.link, cfg.compute, None, memory_census(parties),
                                         cfg.scheme, cfg.n_clients, r))
    return RunResult(None, reports, full, parties)


def run_scheme(cfg: SchemeConfig, data: list[Dataset], risk: RiskMatrix | None = None,
               model: ModelParams | None = None, eval_data: Dataset | None = None) -> RunResult:
    if cfg.scheme == "fusefl_serial":
        return run_fusefl_serial(cfg, data, risk, model, eval_data)
    if cfg.scheme == "fusefl_parallel":
        return run_fusefl_parallel(cfg, data, risk, model, eval_data)
    if cfg.scheme == "ariann_fl":
        return run_ariann_fl(cfg, data, model, eval_data)
    return run_wwfl_like(cfg, data, model)


def upload_bytes_per_server(result: RunResult, round_index: int = 0) -> int:
    """Model-update bytes landing on the busiest aggregator in one round."""
    per = {}
    for m in result.transcript:
        if m.phase == "upload" and m.tag == "model":
            per[m.receiver] = per.get(m.receiver, 0) + m.nbytes
    rounds = max(1, len(result.reports))
    return max(per.values(), default=0) // rounds
