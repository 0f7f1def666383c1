"""Two-party secure training sessions.

A :class:`SecureSession` holds each party's share of the model and of its
momentum buffers and runs forward/backward/SGD steps using Beaver matrix
products, FSS sign gates, and local linear operations. Correlated
randomness is drawn lazily from a triple dealer and a key dealer, with
their material charged as offline traffic.

Every communicating primitive is logged as a schedule event. The same
event list can be derived from shapes alone (:func:`step_schedule`), which
gives the analytic cost model and lets a twin session (plaintext math)
emit a transcript identical to the secure one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sharing as sh
from .errors import ShapeMismatch
from .fss import CmpKeyDealer, cmp_key_bytes, secure_sign, sign_open_bytes
from .neural import (
    Dataset,
    ModelParams,
    TrainConfig,
    batches,
    col2im,
    conv_out_hw,
    im2col,
    one_hot,
    pool_windows,
    sgd_step,
    zero_velocity,
)
from .ring import FixedPointCodec
from .sharing import Shared, TripleDealer
from .transcript import C2C, Link, Transcript

DEFAULT_SETUP_LATENCY = 0.030

# --- schedule events --------------------------------------------------------------------

# ("matmul", x_shape, y_shape) | ("mul", shape) | ("sign", shape)
Event = tuple


def _size(shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


def event_online_bytes(event: Event, domain_bits: int) -> int:
    """Bytes each party sends for one event."""
    if event[0] == "matmul":
        return sh.mul_cost(_size(event[1]), _size(event[2]))
    if event[0] == "mul":
        return sh.mul_cost(_size(event[1]), _size(event[1]))
    return sign_open_bytes(_size(event[1]), domain_bits)


def event_offline_bytes(event: Event, domain_bits: int, backend: str) -> int:
    """Dealer bytes sent to each party for one event."""
    if event[0] == "matmul":
        (m, k), (_, n) = event[1], event[2]
        return 8 * (m * k + k * n + m * n)
    if event[0] == "mul":
        return 8 * 3 * _size(event[1])
    return cmp_key_bytes(_size(event[1]), domain_bits, backend)


def record_event(link: Link, event: Event, domain_bits: int, backend: str) -> None:
    """Emit the transcript entries of one event without doing any math."""
    tag_off, tag_on = ("cmp_key", "fss") if event[0] == "sign" else ("triple", "beaver")
    link.offline(event_offline_bytes(event, domain_bits, backend), tag_off)
    link.exchange(event_online_bytes(event, domain_bits), tag_on)


def step_schedule(model: ModelParams, batch: int) -> list[Event]:
    """Primitive events of one training step on a batch of ``batch`` samples."""
    fwd, bwd = [], []
    shape = (batch,) + tuple(model.input_shape)
    first_param = next(i for i, l in enumerate(model.layers) if l.has_params)
    shapes = []
    for layer in model.layers:
        shapes.append(shape)
        if layer.kind == "dense":
            d_in = _size(shape[1:])
            fwd.append(("matmul", (batch, d_in), layer.weight.shape))
            shape = (batch, layer.weight.shape[1])
        elif layer.kind == "conv":
            c_out, c_in, k, _ = layer.weight.shape
            oh, ow = conv_out_hw(shape[2], shape[3], k)
            fwd.append(("matmul", (batch * oh * ow, c_in * k * k), (c_in * k * k, c_out)))
            shape = (batch, c_out, oh, ow)
        elif layer.kind == "relu":
            fwd += [("sign", shape), ("mul", shape)]
        else:
            o = (batch, shape[1], shape[2] // 2, shape[3] // 2)
            fwd += [("sign", (2,) + o), ("mul", (2,) + o), ("sign", o), ("mul", o), ("mul", (2,) + o)]
            shape = o
    for i in range(len(model.layers) - 1, -1, -1):
        layer, shape = model.layers[i], shapes[i]
        if layer.kind == "dense":
            d_in, d_out = layer.weight.shape
            bwd.append(("matmul", (d_in, batch), (batch, d_out)))
            if i > first_param:
                bwd.append(("matmul", (batch, d_out), (d_out, d_in)))
        elif layer.kind == "conv":
            c_out, c_in, k, _ = layer.weight.shape
            oh, ow = conv_out_hw(shape[2], shape[3], k)
            rows, kk = batch * oh * ow, c_in * k * k
            bwd.append(("matmul", (c_out, rows), (rows, kk)))
            if i > first_param:
                bwd.append(("matmul", (rows, c_out), (c_out, kk)))
        elif layer.kind == "relu":
            if i > first_param:
                bwd.append(("mul", shape))
        elif i > first_param:
            bwd.append(("mul", (4, batch, shape[1], shape[2] // 2, shape[3] // 2)))
    return fwd + bwd


@dataclass(frozen=True)
class StepCost:
    online_bytes_per_party: int
    offline_bytes_per_party: int
    messages: int
    rounds: int

    @property
    def total_online(self) -> int:
        return 2 * self.online_bytes_per_party

    @property
    def total_offline(self) -> int:
        return 2 * self.offline_bytes_per_party


def step_cost(model: ModelParams, batch: int, domain_bits: int = 32, backend: str = "dcf") -> StepCost:
    """Analytic traffic of one secure training step."""
    events = step_schedule(model, batch)
    return StepCost(
        sum(event_online_bytes(e, domain_bits) for e in events),
        sum(event_offline_bytes(e, domain_bits, backend) for e in events),
        4 * len(events),  # one offline message and one opening message per party
        len(events),
    )


def training_cost(model: ModelParams, n_samples: int, cfg: TrainConfig,
                  domain_bits: int = 32, backend: str = "dcf") -> StepCost:
    """Analytic traffic of ``cfg.local_epochs`` passes over ``n_samples`` samples."""
    parts = [step_cost(model, e - s, domain_bits, backend)
             for s, e in batches(n_samples, cfg.batch_size)] * cfg.local_epochs
    return StepCost(sum(p.online_bytes_per_party for p in parts),
                    sum(p.offline_bytes_per_party for p in parts),
                    sum(p.messages for p in parts), sum(p.rounds for p in parts))


# --- batches ----------------------------------------------------------------------------

@dataclass
class SharedBatch:
    x: Shared
    y: Shared

    @property
    def size(self) -> int:
        return self.x[0].shape[0]


@dataclass
class PlainBatch:
    x: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.labels)


def share_dataset(data: Dataset, n_classes: int, rng: np.random.Generator,
                  codec: FixedPointCodec | None = None) -> tuple[Shared, Shared]:
    """Shares of the samples and of their one-hot targets."""
    codec = codec or FixedPointCodec()
    return (sh.share_real(data.samples, rng, codec),
            sh.share_real(one_hot(data.labels, n_classes), rng, codec))


def shared_batches(x: Shared, y: Shared, batch_size: int) -> list[SharedBatch]:
    out = []
    for s, e in batches(x[0].shape[0], batch_size):
        out.append(SharedBatch(tuple(v.with_values(v.values[s:e]) for v in x),
                               tuple(v.with_values(v.values[s:e]) for v in y)))
    return out


def plain_batches(data: Dataset, batch_size: int) -> list[PlainBatch]:
    return [PlainBatch(data.samples[s:e], data.labels[s:e]) for s, e in batches(len(data), batch_size)]


# --- session ------------------------------------------------------------------------------

@dataclass
class SecureSession:
    """One two-party training dialogue.

    In secure mode ``weights`` and ``velocity`` are shared pairs aligned
    with ``template.arrays()``. In twin mode (``twin=True``) the same
    fields hold plaintext arrays and only the transcript is authentic.
    """

    name: str
    endpoints: tuple[str, str]
    template: ModelParams
    weights: list
    velocity: list
    dealer: TripleDealer
    key_dealer: CmpKeyDealer
    transcript: Transcript
    link: Link
    codec: FixedPointCodec
    setup_latency: float = DEFAULT_SETUP_LATENCY
    twin: bool = False
    events: list = field(default_factory=list)
    steps: int = 0

    @property
    def domain_bits(self) -> int:
        return self.key_dealer.domain_bits

    @property
    def backend(self) -> str:
        return self.key_dealer.backend

    # primitives: each issues its correlated randomness, runs, and logs the event

    def _matmul(self, x: Shared, y: Shared) -> Shared:
        t = self.dealer.matmul_triple(x[0].shape, y[0].shape, self.link)
        self.events.append(("matmul", x[0].shape, y[0].shape))
        return sh.matmul_shares(x, y, t, self.link)

    def _mul(self, x: Shared, y: Shared, rescale: bool) -> Shared:
        t = self.dealer.mul_triple(x[0].shape, self.link)
        self.events.append(("mul", x[0].shape))
        return sh.mul_shares(x, y, t, self.link, rescale=rescale)

    def _sign(self, x: Shared) -> Shared:
        keys = self.key_dealer.issue(x[0].shape, self.link)
        self.events.append(("sign", x[0].shape))
        return secure_sign(x, keys, self.link)


def open_session(weights: list[Shared], template: ModelParams, endpoints: tuple[str, str],
                 dealer: TripleDealer, key_dealer: CmpKeyDealer, transcript: Transcript,
                 name: str = "", setup_latency: float = DEFAULT_SETUP_LATENCY,
                 velocity: list[Shared] | None = None, channel: str = C2C,
                 reverse_channel: str | None = None, record_setup: bool = True) -> SecureSession:
    """Start a session on an already-shared model.

    The session-setup handshake is recorded as a zero-byte message in phase
    ``"setup"``; the cost model charges ``setup_latency`` for it. A second
    model trained by the same pair passes ``record_setup=False``.
    """
    arrays = template.arrays()
    if len(weights) != len(arrays):
        raise ShapeMismatch(f"expected {len(arrays)} shared tensors, got {len(weights)}")
    for w, a in zip(weights, arrays):
        sh._check_pair(*w)
        if w[0].shape != a.shape:
            raise ShapeMismatch(f"share shape {w[0].shape} does not match parameter {a.shape}")
    codec = weights[0][0].codec
    link = Link(transcript, tuple(endpoints), channel, session=name, reverse_channel=reverse_channel)
    if record_setup:
        transcript.record(endpoints[0], endpoints[1], channel, 0, "session_setup", "setup", name)
    if velocity is None:
        velocity = [sh.zeros(a.shape, codec) for a in arrays]
    return SecureSession(name, tuple(endpoints), template, list(weights), list(velocity), dealer,
                         key_dealer, transcript, link, codec, setup_latency)


def open_twin_session(model: ModelParams, endpoints: tuple[str, str], transcript: Transcript,
                      name: str = "", domain_bits: int = 32, backend: str = "dcf",
                      setup_latency: float = DEFAULT_SETUP_LATENCY,
                      codec: FixedPointCodec | None = None, channel: str = C2C,
                      reverse_channel: str | None = None, record_setup: bool = True,
                      metering: bool = False) -> SecureSession:
    """Plaintext-math session whose transcript matches the secure one byte for byte.

    With ``metering`` the session allocates no weight or velocity buffers;
    only :func:`meter_local` may be called on it.
    """
    codec = codec or FixedPointCodec()
    link = Link(transcript, tuple(endpoints), channel, session=name, reverse_channel=reverse_channel)
    if record_setup:
        transcript.record(endpoints[0], endpoints[1], channel, 0, "session_setup", "setup", name)
    weights = [] if metering else [a.copy() for a in model.arrays()]
    velocity = [] if metering else zero_velocity(model)
    return SecureSession(name, tuple(endpoints), model, weights, velocity, TripleDealer(0, codec),
                         CmpKeyDealer(0, domain_bits, backend, codec),
                         transcript, link, codec, setup_latency, twin=True)


def share_model(model: ModelParams, rng: np.random.Generator,
                codec: FixedPointCodec | None = None) -> list[Shared]:
    codec = codec or FixedPointCodec()
    return [sh.share_real(a, rng, codec) for a in model.arrays()]


def reconstruct_model(template: ModelParams, weights: list[Shared]) -> ModelParams:
    """Model-owner reconstruction (also the only test path for reading a model)."""
    return template.with_arrays([sh.reconstruct_real(w) for w in weights])


# --- secure layers ------------------------------------------------------------------------

def _add_bias(x: Shared, b: Shared) -> Shared:
    return tuple(v.with_values(v.values + bv.values) for v, bv in zip(x, b))


def _one_minus(bits: Shared) -> Shared:
    return sh.add_public(sh.neg(bits), np.uint64(1))


def _map(x: Shared, fn) -> Shared:
    """Apply a local (linear, data-independent) reshaping to both halves."""
    return tuple(v.with_values(fn(v.values)) for v in x)


def _stack(parts: list[Shared]) -> Shared:
    return tuple(parts[0][j].with_values(np.stack([p[j].values for p in parts])) for j in (0, 1))


def _maxpool(sess: SecureSession, x: Shared):
    wins = [pool_windows(v.values) for v in x]
    a, b, c, d = (tuple(x[j].with_values(wins[j][k]) for j in (0, 1)) for k in range(4))
    diff = _stack([sh.sub(a, b), sh.sub(c, d)])
    keep = _one_minus(sess._sign(diff))                       # [a >= b], [c >= d]
    m = sh.add(_stack([b, d]), sess._mul(keep, diff, rescale=False))
    m_ab, m_cd = _map(m, lambda v: v[0]), _map(m, lambda v: v[1])
    diff2 = sh.sub(m_ab, m_cd)
    s = _one_minus(sess._sign(diff2))                         # [m_ab >= m_cd]
    out = sh.add(m_cd, sess._mul(s, diff2, rescale=False))
    s_ab, s_cd = _map(keep, lambda v: v[0]), _map(keep, lambda v: v[1])
    p = sess._mul(_stack([s, s]), keep, rescale=False)
    p0, p1 = _map(p, lambda v: v[0]), _map(p, lambda v: v[1])
    sel = _stack([p0, sh.sub(s, p0), sh.sub(s_cd, p1), sh.sub(_one_minus(s), sh.sub(s_cd, p1))])
    return out, (x[0].shape, sel)


def _route(parts: Shared, shape) -> Shared:
    """Place the four per-corner gradient tensors back into the pooled input grid."""
    out = []
    for j in (0, 1):
        buf = np.zeros(shape, dtype=np.uint64)
        for k, (i, jj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            buf[:, :, i::2, jj::2] = parts[j].values[k]
        out.append(parts[j].with_values(buf))
    return tuple(out)


def secure_forward(sess: SecureSession, x: Shared, keep_cache: bool = False):
    """Shares of the network output (and the backward cache if requested)."""
    if sess.twin:
        raise RuntimeError("secure_forward needs a secure session")
    tpl = sess.template
    if x[0].shape[1:] != tuple(tpl.input_shape):
        if _size(x[0].shape[1:]) != _size(tpl.input_shape):
            raise ShapeMismatch(f"input {x[0].shape[1:]} does not fit {tpl.input_shape}")
        x = sh.reshape(x, (x[0].shape[0],) + tuple(tpl.input_shape))
    cache, k = [], 0
    for layer in tpl.layers:
        if layer.kind == "dense":
            w, b = sess.weights[k], sess.weights[k + 1]
            k += 2
            flat = sh.reshape(x, (x[0].shape[0], -1))
            cache.append((x[0].shape, flat))
            x = _add_bias(sess._matmul(flat, w), b)
        elif layer.kind == "conv":
            w, b = sess.weights[k], sess.weights[k + 1]
            k += 2
            kk = layer.hyper["kernel"]
            bsz, _, h, wd = x[0].shape
            oh, ow = conv_out_hw(h, wd, kk)
            cols = _map(x, lambda v: im2col(v, kk))
            cache.append((x[0].shape, cols))
            wt = _map(w, lambda v: np.ascontiguousarray(v.reshape(v.shape[0], -1).T))
            y = _add_bias(sess._matmul(cols, wt), b)
            x = _map(y, lambda v: np.ascontiguousarray(v.reshape(bsz, oh, ow, -1).transpose(0, 3, 1, 2)))
        elif layer.kind == "relu":
            bits = sess._sign(x)
            keep = _one_minus(bits)
            cache.append(keep)
            x = sess._mul(x, keep, rescale=False)
        else:
            x, c = _maxpool(sess, x)
            cache.append(c)
    return (x, cache) if keep_cache else x


def secure_backward_step(sess: SecureSession, batch: SharedBatch, cfg: TrainConfig) -> SecureSession:
    """One SGD-with-momentum step on the shared model."""
    tpl = sess.template
    out, cache = secure_forward(sess, batch.x, keep_cache=True)
    # backpropagate the unnormalised residual and divide by the batch size
    # once at the end, so the division's rounding is not amplified by the sums
    g = sh.sub(out, batch.y)
    first_param = next(i for i, l in enumerate(tpl.layers) if l.has_params)
    grads = [None] * len(sess.weights)
    k = len(sess.weights)
    for i in range(len(tpl.layers) - 1, -1, -1):
        layer, c = tpl.layers[i], cache[i]
        if layer.kind == "dense":
            k -= 2
            shape, flat = c
            grads[k] = sess._matmul(sh.transpose(flat), g)
            grads[k + 1] = sh.sum_axis(g, 0)
            if i > first_param:
                g = sh.reshape(sess._matmul(g, sh.transpose(sess.weights[k])), shape)
        elif layer.kind == "conv":
            k -= 2
            shape, cols = c
            w = sess.weights[k]
            gf = _map(g, lambda v: np.ascontiguousarray(v.transpose(0, 2, 3, 1).reshape(-1, v.shape[1])))
            grads[k] = sh.reshape(sess._matmul(sh.transpose(gf), cols), w[0].shape)
            grads[k + 1] = sh.sum_axis(gf, 0)
            if i > first_param:
                dcols = sess._matmul(gf, sh.reshape(w, (w[0].shape[0], -1)))
                g = _map(dcols, lambda v: col2im(v, shape, layer.hyper["kernel"]))
        elif layer.kind == "relu":
            if i > first_param:
                g = sess._mul(g, c, rescale=False)
        elif i > first_param:
            shape, sel = c
            g4 = _map(g, lambda v: np.broadcast_to(v, (4,) + v.shape).copy())
            g = _route(sess._mul(g4, sel, rescale=False), shape)
    # batch-size, learning-rate and momentum scalings are public constants: local only
    grads = [sh.mul_public(gr, 1.0 / batch.size) for gr in grads]
    new_v = [sh.add(sh.mul_public(v, cfg.momentum), gr) for v, gr in zip(sess.velocity, grads)]
    new_w = [sh.sub(w, sh.mul_public(v, cfg.learning_rate)) for w, v in zip(sess.weights, new_v)]
    sess.velocity, sess.weights = new_v, new_w
    sess.steps += 1
    return sess


def _twin_step(sess: SecureSession, batch: PlainBatch, cfg: TrainConfig) -> SecureSession:
    model = sess.template.with_arrays(sess.weights)
    model, sess.velocity = sgd_step(model, sess.velocity, batch.x, batch.labels, cfg)
    sess.weights = model.arrays()
    for e in step_schedule(sess.template, batch.size):
        record_event(sess.link, e, sess.domain_bits, sess.backend)
        sess.events.append(e)
    sess.steps += 1
    return sess


def train_local(sess: SecureSession, data_batches: list, cfg: TrainConfig) -> SecureSession:
    """``cfg.local_epochs`` ordered passes over ``data_batches``.

    Secure sessions take :class:`SharedBatch` items; twin sessions take
    :class:`PlainBatch` items.
    """
    if cfg.local_epochs < 1:
        raise ValueError("local_epochs must be at least 1")
    step = _twin_step if sess.twin else secure_backward_step
    for _ in range(cfg.local_epochs):
        for batch in data_batches:
            step(sess, batch, cfg)
    return sess


def session_model(sess: SecureSession) -> ModelParams:
    """Plaintext model of a twin session (secure sessions need :func:`reconstruct_model`)."""
    if not sess.twin:
        raise RuntimeError("secure session weights are shared; reconstruct through the model owner")
    return sess.template.with_arrays(sess.weights)


def meter_local(sess: SecureSession, n_samples: int, cfg: TrainConfig,
                bytes_per_pass: int | None = None) -> SecureSession:
    """Record the traffic of ``train_local`` in aggregate, without any math.

    Each pass over the data becomes one offline message and one opening
    per party carrying the analytic totals. ``bytes_per_pass`` replaces the
    analytic online volume (both directions combined) with a fixed figure.
    """
    one_pass = TrainConfig(cfg.learning_rate, cfg.momentum, 1, 1, cfg.batch_size, cfg.rng_seed)
    cost = training_cost(sess.template, n_samples, one_pass, sess.domain_bits, sess.backend)
    for _ in range(cfg.local_epochs):
        if bytes_per_pass is None:
            sess.link.offline(cost.offline_bytes_per_party, "triple")
            sess.link.exchange(cost.online_bytes_per_party, "train_meter")
        else:
            sess.link.exchange(bytes_per_pass // 2, "train_meter")
        sess.steps += len(batches(n_samples, cfg.batch_size))
    return sess
