"""Plaintext reference networks, SGD with momentum, and dataset handling.

Everything here is ordinary float64 NumPy. The secure engine mirrors the
same layer schedule, so these routines serve as its oracle.

Layout conventions: dense weights are ``(in, out)`` and act as
``x @ W + b``; conv weights are ``(C_out, C_in, k, k)`` applied as a
matrix product over im2col patches; max pooling is 2x2 with stride 2.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ArchMismatch, BadMagic, ShapeMismatch, TruncatedFile, UnknownArchitecture

# --- model containers -----------------------------------------------------------------

LAYER_KINDS = ("dense", "conv", "maxpool", "relu")


@dataclass
class Layer:
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.weight is not None


@dataclass
class ModelParams:
    """Layer-structured parameters plus architecture metadata."""

    name: str
    input_shape: tuple[int, ...]
    layers: list[Layer]

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())

    @property
    def output_dim(self) -> int:
        return int(next(l for l in reversed(self.layers) if l.has_params).bias.size)

    def arrays(self) -> list[np.ndarray]:
        """Parameter tensors in canonical order (weight, bias per layer)."""
        out = []
        for layer in self.layers:
            if layer.has_params:
                out.extend((layer.weight, layer.bias))
        return out

    def with_arrays(self, arrays) -> ModelParams:
        arrays = list(arrays)
        layers, k = [], 0
        for layer in self.layers:
            if layer.has_params:
                w, b = arrays[k], arrays[k + 1]
                if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                    raise ShapeMismatch(f"parameter shapes differ in layer {len(layers)}")
                layers.append(replace(layer, weight=w, bias=b))
                k += 2
            else:
                layers.append(layer)
        if k != len(arrays):
            raise ShapeMismatch(f"expected {k} parameter arrays, got {len(arrays)}")
        return ModelParams(self.name, self.input_shape, layers)

    def copy(self) -> ModelParams:
        return self.with_arrays([a.copy() for a in self.arrays()])

    def signature(self) -> tuple:
        """Architecture identity: layer kinds plus parameter shapes."""
        return tuple((l.kind, None if l.weight is None else l.weight.shape) for l in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def from_flat(self, vec: np.ndarray) -> ModelParams:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.param_count:
            raise ShapeMismatch(f"expected {self.param_count} values, got {vec.size}")
        out, k = [], 0
        for a in self.arrays():
            out.append(vec[k:k + a.size].reshape(a.shape).copy())
            k += a.size
        return self.with_arrays(out)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    local_epochs: int = 1
    global_epochs: int = 1
    batch_size: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.local_epochs < 0 or self.global_epochs < 0:
            raise ValueError("batch_size must be positive and epoch counts non-negative")


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    sample_bytes: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise ShapeMismatch(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.sample_bytes is None:
            self.sample_bytes = 8 * (self.samples.size + self.labels.size)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, start: int, stop: int) -> Dataset:
        n = len(self)
        frac = (stop - start) / n if n else 0.0
        return Dataset(self.samples[start:stop], self.labels[start:stop],
                       int(round(self.sample_bytes * frac)))

    @staticmethod
    def concat(parts: list[Dataset]) -> Dataset:
        return Dataset(np.concatenate([p.samples for p in parts]),
                       np.concatenate([p.labels for p in parts]),
                       sum(p.sample_bytes for p in parts))


# --- architectures --------------------------------------------------------------------

def _dense(rng, n_in, n_out) -> Layer:
    bound = 1.0 / np.sqrt(n_in)
    return Layer("dense", rng.uniform(-bound, bound, (n_in, n_out)), rng.uniform(-bound, bound, n_out))


def _conv(rng, c_in, c_out, k) -> Layer:
    bound = 1.0 / np.sqrt(c_in * k * k)
    return Layer("conv", rng.uniform(-bound, bound, (c_out, c_in, k, k)),
                 rng.uniform(-bound, bound, c_out), {"kernel": k})


_RELU = Layer("relu")
_POOL = Layer("maxpool", hyper={"size": 2})

ARCHITECTURES = ("network1", "network1-reduced", "network2", "lenet", "tiny")


def build_network(name: str, input_shape=None, seed: int = 0, n_classes: int | None = None) -> ModelParams:
    """Deterministically initialised network (uniform +-1/sqrt(fan_in)).

    ``network1`` is the 784-128-128-10 MLP; ``network1-reduced`` shrinks the
    hidden width to 32; ``network2`` and ``lenet`` are the two small CNNs;
    ``tiny`` is a 2-layer MLP (hidden width 8) for fast tests.
    """
    rng = np.random.default_rng(seed)
    if name in ("network1", "network1-reduced"):
        shape = tuple(input_shape or (28, 28))
        d = int(np.prod(shape))
        h = 128 if name == "network1" else 32
        c = n_classes or 10
        layers = [_dense(rng, d, h), _RELU, _dense(rng, h, h), _RELU, _dense(rng, h, c)]
    elif name in ("network2", "lenet"):
        shape = tuple(input_shape or (1, 28, 28))
        if len(shape) == 2:
            shape = (1,) + shape
        c1, c2, hidden = (16, 16, 100) if name == "network2" else (20, 50, 500)
        side = ((shape[1] - 4) // 2 - 4) // 2
        side_w = ((shape[2] - 4) // 2 - 4) // 2
        if side < 1 or side_w < 1:
            raise ShapeMismatch(f"input {shape} too small for {name}")
        layers = [_conv(rng, shape[0], c1, 5), _RELU, _POOL, _conv(rng, c1, c2, 5), _RELU, _POOL,
                  _dense(rng, c2 * side * side_w, hidden), _RELU, _dense(rng, hidden, n_classes or 10)]
    elif name == "tiny":
        shape = tuple(input_shape or (4,))
        d = int(np.prod(shape))
        layers = [_dense(rng, d, 8), _RELU, _dense(rng, 8, n_classes or 2)]
    else:
        raise UnknownArchitecture(name)
    return ModelParams(name, shape, layers)


# --- im2col / pooling helpers (dtype-agnostic, shared with the secure engine) -------

def conv_out_hw(h: int, w: int, k: int) -> tuple[int, int]:
    return h - k + 1, w - k + 1


def im2col_indices(c: int, h: int, w: int, k: int):
    oh, ow = conv_out_hw(h, w, k)
    ch = np.repeat(np.arange(c), k * k)
    di = np.tile(np.repeat(np.arange(k), k), c)
    dj = np.tile(np.arange(k), k * c)
    rows = di[:, None] + np.repeat(np.arange(oh), ow)[None, :]
    cols = dj[:, None] + np.tile(np.arange(ow), oh)[None, :]
    return ch[:, None], rows, cols


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> (B*L, C*k*k) patch matrix, L = output positions."""
    b, c, h, w = x.shape
    ch, rows, cols = im2col_indices(c, h, w, k)
    patches = x[:, ch, rows, cols]              # (B, K, L)
    return patches.transpose(0, 2, 1).reshape(b * rows.shape[1], -1)


def col2im(cols: np.ndarray, x_shape, k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back."""
    b, c, h, w = x_shape
    ch, rows, cl = im2col_indices(c, h, w, k)
    out = np.zeros(x_shape, dtype=cols.dtype)
    patches = cols.reshape(b, rows.shape[1], -1).transpose(0, 2, 1)
    np.add.at(out, (slice(None), ch, rows, cl), patches)
    return out


def pool_windows(x: np.ndarray) -> list[np.ndarray]:
    """The four 2x2-window corners of (B, C, H, W), each (B, C, H/2, W/2)."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"2x2 pooling needs even spatial dims, got {h}x{w}")
    return [x[:, :, i::2, j::2] for i in (0, 1) for j in (0, 1)]


def unpool(grad: np.ndarray, selectors: list[np.ndarray], x_shape) -> np.ndarray:
    """Route pooled gradients back through per-corner 0/1 selectors."""
    out = np.zeros(x_shape, dtype=grad.dtype)
    for (i, j), sel in zip(((0, 0), (0, 1), (1, 0), (1, 1)), selectors):
        out[:, :, i::2, j::2] = grad * sel
    return out


def _maxpool_forward(x: np.ndarray):
    # fixed tournament order so ties resolve the same way as the secure version
    a, b, c, d = pool_windows(x)
    s_ab = a >= b
    s_cd = c >= d
    m_ab = np.where(s_ab, a, b)
    m_cd = np.where(s_cd, c, d)
    s = m_ab >= m_cd
    sel = [s & s_ab, s & ~s_ab, ~s & s_cd, ~s & ~s_cd]
    return np.where(s, m_ab, m_cd), [v.astype(np.float64) for v in sel]


# --- forward / backward ---------------------------------------------------------------

def forward(model: ModelParams, x: np.ndarray):
    """Network output and the per-layer cache needed by :func:`backward`."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != tuple(model.input_shape):
        if x[0].size != int(np.prod(model.input_shape)):
            raise ShapeMismatch(f"input {x.shape[1:]} does not fit {model.input_shape}")
        x = x.reshape((x.shape[0],) + tuple(model.input_shape))
    cache = []
    for layer in model.layers:
        if layer.kind == "dense":
            flat = x.reshape(x.shape[0], -1)
            cache.append((x.shape, flat))
            x = flat @ layer.weight + layer.bias
        elif layer.kind == "conv":
            k = layer.hyper["kernel"]
            oh, ow = conv_out_hw(x.shape[2], x.shape[3], k)
            cols = im2col(x, k)
            cache.append((x.shape, cols))
            wm = layer.weight.reshape(layer.weight.shape[0], -1)
            y = cols @ wm.T + layer.bias
            x = y.reshape(x.shape[0], oh, ow, -1).transpose(0, 3, 1, 2)
        elif layer.kind == "relu":
            cache.append(x >= 0)
            x = np.where(x >= 0, x, 0.0)
        else:
            y, sel = _maxpool_forward(x)
            cache.append((x.shape, sel))
            x = y
    return x, cache


def predict(model: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward(model, x)[0]


def backward(model: ModelParams, cache, dout: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients (canonical order) given d(loss)/d(output)."""
    grads = []
    g = dout
    for layer, c in zip(reversed(model.layers), reversed(cache)):
        if layer.kind == "dense":
            shape, flat = c
            grads.extend((g.sum(axis=0), flat.T @ g))
            g = (g @ layer.weight.T).reshape(shape)
        elif layer.kind == "conv":
            shape, cols = c
            gf = g.transpose(0, 2, 3, 1).reshape(-1, g.shape[1])
            wm = layer.weight.reshape(layer.weight.shape[0], -1)
            grads.extend((gf.sum(axis=0), (gf.T @ cols).reshape(layer.weight.shape)))
            g = col2im(gf @ wm, shape, layer.hyper["kernel"])
        elif layer.kind == "relu":
            g = g * c
        else:
            shape, sel = c
            g = unpool(g, sel, shape)
    grads.reverse()
    return grads


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return np.eye(n_classes)[np.asarray(labels, dtype=np.int64)]


def mse_loss(out: np.ndarray, target: np.ndarray) -> float:
    """``1/(2B) * sum((out - target)^2)``."""
    return float(((out - target) ** 2).sum() / (2 * len(out)))


def loss_and_grads(model: ModelParams, x: np.ndarray, labels: np.ndarray):
    out, cache = forward(model, x)
    target = one_hot(labels, out.shape[1])
    return mse_loss(out, target), backward(model, cache, (out - target) / len(out))


# --- training -------------------------------------------------------------------------

def batches(n: int, batch_size: int):
    """Contiguous ``(start, stop)`` batch bounds; the last batch may be short."""
    return [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


def sgd_step(model: ModelParams, velocity: list[np.ndarray], x, labels, cfg: TrainConfig):
    """One momentum step ``v <- mu*v + g; w <- w - lr*v``."""
    _, grads = loss_and_grads(model, x, labels)
    velocity = [cfg.momentum * v + g for v, g in zip(velocity, grads)]
    new = [w - cfg.learning_rate * v for w, v in zip(model.arrays(), velocity)]
    return model.with_arrays(new), velocity


def zero_velocity(model: ModelParams) -> list[np.ndarray]:
    return [np.zeros_like(a) for a in model.arrays()]


def train_plaintext(model: ModelParams, data: Dataset, cfg: TrainConfig,
                    velocity: list[np.ndarray] | None = None, return_velocity: bool = False):
    """``cfg.local_epochs`` passes over ``data`` in order, no shuffling."""
    if data.samples[0:1].size and data.samples[0].size != int(np.prod(model.input_shape)):
        raise ShapeMismatch(f"samples {data.samples.shape[1:]} do not fit {model.input_shape}")
    velocity = zero_velocity(model) if velocity is None else velocity
    model = model.copy()
    for _ in range(cfg.local_epochs):
        for s, e in batches(len(data), cfg.batch_size):
            model, velocity = sgd_step(model, velocity, data.samples[s:e], data.labels[s:e], cfg)
    return (model, velocity) if return_velocity else model


def train_sequential(model: ModelParams, datasets: list[Dataset], cfg: TrainConfig) -> ModelParams:
    """Train on each dataset in turn (``local_epochs`` each), carrying momentum."""
    velocity = None
    for data in datasets:
        model, velocity = train_plaintext(model, data, cfg, velocity, return_velocity=True)
    return model


def accuracy(model: ModelParams, data: Dataset) -> float:
    if len(data) == 0:
        return 0.0
    return float((predict(model, data.samples).argmax(axis=1) == data.labels).mean())


def evaluate_loss(model: ModelParams, data: Dataset) -> float:
    out = predict(model, data.samples)
    return mse_loss(out, one_hot(data.labels, out.shape[1]))


# --- exact federated averaging ----------------------------------------------------------

_EXP_SHIFT = 1074  # every finite double times 2^1074 is an integer


def _exact_ints(a: np.ndarray) -> np.ndarray:
    mant, exp = np.frexp(np.asarray(a, dtype=np.float64).reshape(-1))
    m = (mant * 2.0 ** 53).astype(np.int64).astype(object)
    shift = (exp.astype(np.int64) - 53 + _EXP_SHIFT).astype(object)
    return m * (2 ** shift)


class ExactAccumulator:
    """Weighted sum of models held as exact rationals.

    Nested averages (groups, then servers) combine without intermediate
    rounding, so a hierarchical average equals the flat one bit for bit.
    """

    def __init__(self, template: ModelParams):
        self.template = template
        self.weight = 0
        self._num = [np.zeros(a.size, dtype=object) for a in template.arrays()]

    def add(self, model: ModelParams, weight: int) -> None:
        if model.signature() != self.template.signature():
            raise ArchMismatch("cannot average models of different architectures")
        if weight < 0 or int(weight) != weight:
            raise ValueError("weights must be non-negative integers")
        for acc, a in zip(self._num, model.arrays()):
            acc += _exact_ints(a) * int(weight)
        self.weight += int(weight)

    def merge(self, other: ExactAccumulator) -> None:
        if other.template.signature() != self.template.signature():
            raise ArchMismatch("cannot average models of different architectures")
        for acc, o in zip(self._num, other._num):
            acc += o
        self.weight += other.weight

    def mean(self) -> ModelParams:
        if self.weight <= 0:
            raise ValueError("total weight must be positive")
        den = self.weight * 2 ** _EXP_SHIFT
        # int / int is correctly rounded in Python
        out = [np.array([v / den for v in acc], dtype=np.float64).reshape(a.shape)
               for acc, a in zip(self._num, self.template.arrays())]
        return self.template.with_arrays(out)


def fedavg_plaintext(models: list[ModelParams], weights: list[int] | None = None) -> ModelParams:
    """Weighted mean ``sum(n_k / n * w_k)``, correctly rounded per entry."""
    if not models:
        raise ValueError("need at least one model")
    weights = [1] * len(models) if weights is None else list(weights)
    if len(weights) != len(models):
        raise ValueError("one weight per model required")
    acc = ExactAccumulator(models[0])
    for m, w in zip(models, weights):
        acc.add(m, w)
    return acc.mean()


def fedavg_rational_oracle(models: list[ModelParams], weights: list[int]) -> np.ndarray:
    """Slow per-entry Fraction reference for :func:`fedavg_plaintext`."""
    n = sum(weights)
    flats = [m.flat() for m in models]
    return np.array([float(sum(Fraction(int(w)) * Fraction(f[i]) for f, w in zip(flats, weights)) / n)
                     for i in range(flats[0].size)])


# --- datasets -------------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: missing header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagic(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFile(f"{path}: incomplete dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise TruncatedFile(f"{path}: expected {count} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS, labels_path)
    if len(images) != len(labels):
        raise ShapeMismatch(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), images.size)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-D -> image magic, 1-D -> label magic)."""
    array = np.asarray(array, dtype=np.uint8)
    magics = {1: IDX_LABELS, 3: IDX_IMAGES}
    if array.ndim not in magics:
        raise ValueError("IDX writer supports 1-D labels or 3-D images")
    header = struct.pack(">I", magics[array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def partition_uniform(data: Dataset, n_clients: int) -> list[Dataset]:
    """Contiguous equal shards; the remainder goes to the last shard."""
    if n_clients < 1:
        raise ValueError("n_clients must be at least 1")
    size = len(data) // n_clients
    bounds = [(i * size, (i + 1) * size if i < n_clients - 1 else len(data)) for i in range(n_clients)]
    return [data.subset(s, e) for s, e in bounds]


def make_blobs(n_samples: int, dims: int = 4, n_classes: int = 2, seed: int = 0,
               separation: float = 3.0, spread: float = 1.0) -> Dataset:
    """Seeded Gaussian clusters with well-separated centres, classes interleaved."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(n_classes, dims))
    centres *= separation / np.linalg.norm(centres, axis=1, keepdims=True)
    labels = np.arange(n_samples) % n_classes
    samples = centres[labels] + spread * rng.normal(size=(n_samples, dims)) / np.sqrt(dims)
    return Dataset(samples, labels)
