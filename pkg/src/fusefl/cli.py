"""Command-line experiment runner.

Subcommands::

    fusefl run <config>                 one scheme end to end
    fusefl sweep <config> --n 16 64     metering sweep over client counts
    fusefl match <matrix> [--greedy]    pair clients from a risk matrix
    fusefl mnist-info <images> <labels> summarise an IDX pair

Configs are ``key = value`` lines; ``#`` starts a comment. See
``CONFIG_KEYS`` for the accepted keys and their defaults. Output files go
to ``output_dir`` unless ``FUSEFL_OUTPUT_DIR`` is set.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import io
import os
import sys
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FuseFLError, OddClientCount, UnknownArchitecture
from .grouping import MATCHERS, RiskMatrix, match
from .neural import ARCHITECTURES, Dataset, ModelParams, TrainConfig, load_mnist_idx, make_blobs, \
    partition_uniform
from .netsim import (
    ComputeModel,
    LinkModel,
    paper_calibration,
    reports_to_csv,
    rows_to_csv,
    scaling_sweep,
    sweep_rows,
)
from .protocol import MODES, SCHEMES, SchemeConfig, run_scheme, upload_bytes_per_server

OUTPUT_ENV = "FUSEFL_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}

# key -> (parser, default)
CONFIG_KEYS = {
    "scheme": (str, "fusefl_serial"),
    "n_clients": (int, 4),
    "network": (str, "tiny"),
    "mode": (str, "twin"),
    "dataset": (str, "synthetic"),
    "mnist_images": (str, ""),
    "mnist_labels": (str, ""),
    "mnist_subset": (int, 0),
    "samples_per_client": (int, 32),
    "synthetic_dims": (int, 4),
    "synthetic_classes": (int, 2),
    "data_seed": (int, 0),
    "sample_bytes": (int, 0),
    "learning_rate": (float, 0.05),
    "momentum": (float, 0.9),
    "local_epochs": (int, 1),
    "global_epochs": (int, 2),
    "batch_size": (int, 8),
    "frac_bits": (int, 16),
    "domain_bits": (int, 32),
    "fss_backend": (str, "dcf"),
    "matcher": (str, "exact"),
    "risk_matrix": (str, ""),
    "risk_metadata": (str, ""),
    "repeat_penalty": (float, 0.0),
    "exact_cap": (int, 64),
    "cores_per_server": (int, 16),
    "wwfl_cluster_size": (int, 10),
    "train_bytes_per_pass": (int, 0),
    "link_profile": (str, "custom"),
    "server_bandwidth": (float, 125e6),
    "client_bandwidth": (float, 125e6),
    "c2c_parallel": (lambda v: _parse_bool(v), True),
    "base_rtt": (float, 0.0),
    "session_setup": (float, 0.030),
    "serialize_servers": (lambda v: _parse_bool(v), False),
    "count_distribution": (lambda v: _parse_bool(v), True),
    "seconds_per_byte": (float, 2e-8),
    "seconds_per_round": (float, 1e-4),
    "sweep_schemes": (lambda v: tuple(s.strip() for s in v.split(",") if s.strip()),
                      ("ariann_fl", "fusefl_serial")),
    "seed": (int, 0),
    "output_dir": (str, "out"),
}

LINK_PROFILES = ("custom", "paper-calibration")


def _parse_bool(value: str) -> bool:
    try:
        return _BOOL[value.lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {value!r}") from None


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in CONFIG_KEYS.items()})
    base_dir: Path = Path(".")

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def path(self, key: str) -> Path:
        p = Path(self.values[key])
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> None:
        v = self.values
        if v["scheme"] not in SCHEMES:
            raise ConfigError(f"unknown scheme {v['scheme']!r}; choose one of {', '.join(SCHEMES)}")
        if v["mode"] not in MODES:
            raise ConfigError(f"unknown mode {v['mode']!r}; choose one of {', '.join(MODES)}")
        if v["network"] not in ARCHITECTURES:
            raise ConfigError(f"unknown network {v['network']!r}")
        if v["dataset"] not in ("synthetic", "mnist"):
            raise ConfigError("dataset must be 'synthetic' or 'mnist'")
        if v["dataset"] == "mnist" and not (v["mnist_images"] and v["mnist_labels"]):
            raise ConfigError("dataset = mnist needs mnist_images and mnist_labels")
        if v["matcher"] not in MATCHERS:
            raise ConfigError(f"unknown matcher {v['matcher']!r}")
        if v["link_profile"] not in LINK_PROFILES:
            raise ConfigError(f"unknown link_profile {v['link_profile']!r}")
        if v["risk_matrix"] and v["risk_metadata"]:
            raise ConfigError("give at most one of risk_matrix and risk_metadata")
        if v["n_clients"] < 1 or v["samples_per_client"] < 0:
            raise ConfigError("n_clients must be positive and samples_per_client non-negative")
        for s in v["sweep_schemes"]:
            if s not in SCHEMES:
                raise ConfigError(f"unknown scheme {s!r} in sweep_schemes")
        try:
            self.train_config()
            self.link_model()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["learning_rate"], v["momentum"], v["local_epochs"], v["global_epochs"],
                           v["batch_size"], v["seed"])

    def link_model(self) -> LinkModel:
        v = self.values
        return LinkModel(v["server_bandwidth"], v["client_bandwidth"], v["c2c_parallel"], v["base_rtt"],
                         v["session_setup"], v["serialize_servers"], v["count_distribution"])

    def scheme_config(self, link: LinkModel | None = None) -> SchemeConfig:
        v = self.values
        try:
            return SchemeConfig(
                v["scheme"], v["n_clients"], network=v["network"], train=self.train_config(),
                mode=v["mode"], cores_per_server=v["cores_per_server"], frac_bits=v["frac_bits"],
                domain_bits=v["domain_bits"], fss_backend=v["fss_backend"], matcher=v["matcher"],
                repeat_penalty=v["repeat_penalty"], exact_cap=v["exact_cap"],
                link=link or self.link_model(),
                compute=ComputeModel(v["seconds_per_byte"], v["seconds_per_round"]),
                train_bytes_per_pass=v["train_bytes_per_pass"] or None,
                wwfl_cluster_size=v["wwfl_cluster_size"], seed=v["seed"])
        except OddClientCount:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def parse_config(text: str, base_dir: Path = Path(".")) -> ExperimentConfig:
    cfg = ExperimentConfig(base_dir=base_dir)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser = CONFIG_KEYS[key][0]
        try:
            cfg.values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, path.parent)


# --- data --------------------------------------------------------------------------------

def _fit_to_network(data: Dataset, network: str) -> Dataset:
    x = data.samples
    if network in ("network2", "lenet") and x.ndim == 3:
        x = x[:, None]
    elif network not in ("network2", "lenet") and x.ndim > 2:
        x = x.reshape(len(x), -1)
    return Dataset(x, data.labels, data.sample_bytes)


def client_data(cfg: ExperimentConfig, n: int | None = None) -> list[Dataset]:
    n = n or cfg.n_clients
    if cfg.dataset == "mnist":
        full = load_mnist_idx(cfg.path("mnist_images"), cfg.path("mnist_labels"))
        if cfg.mnist_subset:
            full = full.subset(0, min(cfg.mnist_subset, len(full)))
        full = _fit_to_network(full, cfg.network)
    else:
        full = make_blobs(cfg.samples_per_client * n, cfg.synthetic_dims, cfg.synthetic_classes,
                          seed=cfg.data_seed)
    parts = partition_uniform(full, n)
    if cfg.sample_bytes:
        for p in parts:
            p.sample_bytes = cfg.sample_bytes
    return parts


def load_risk(cfg: ExperimentConfig) -> RiskMatrix | None:
    if cfg.risk_matrix:
        return RiskMatrix.from_file(cfg.path("risk_matrix"))
    if cfg.risk_metadata:
        return RiskMatrix.from_metadata(cfg.path("risk_metadata"))
    return None


def resolve_link(cfg: ExperimentConfig) -> LinkModel:
    if cfg.link_profile == "paper-calibration":
        return paper_calibration(n_list=(), session_setup=cfg.session_setup)[0]
    return cfg.link_model()


# --- outputs -----------------------------------------------------------------------------

def output_dir(cfg: ExperimentConfig) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    out = Path(env) if env else cfg.path("output_dir")
    out.mkdir(parents=True, exist_ok=True)
    return out


def save_model(path, model: ModelParams) -> None:
    """Write parameters as ``.npz`` with fixed zip timestamps, so reruns are byte-identical."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for i, a in enumerate([np.array(model.name)] + model.arrays()):
            buf = io.BytesIO()
            np.save(buf, a, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{'name' if i == 0 else f'p{i - 1}'}.npy", (1980, 1, 1, 0, 0, 0)),
                        buf.getvalue())


def load_model_arrays(path) -> tuple[str, list[np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        count = len(z.files) - 1
        return str(z["name"]), [z[f"p{i}"] for i in range(count)]


SUMMARY_COLUMNS = ("scheme", "n", "mode", "rounds", "bytes_c2c", "bytes_s2c", "bytes_c2s", "bytes_offline",
                   "upload_bytes_per_server", "latency_s", "epoch_s", "final_loss", "final_accuracy")


def summary_row(cfg: ExperimentConfig, result) -> dict:
    reps = result.reports
    last = reps[-1] if reps else None
    return {
        "scheme": cfg.scheme, "n": cfg.n_clients, "mode": cfg.mode, "rounds": len(reps),
        "bytes_c2c": sum(r.bytes_c2c for r in reps), "bytes_s2c": sum(r.bytes_s2c for r in reps),
        "bytes_c2s": sum(r.bytes_c2s for r in reps), "bytes_offline": sum(r.bytes_offline for r in reps),
        "upload_bytes_per_server": upload_bytes_per_server(result),
        "latency_s": sum(r.latency_critical_path for r in reps), "epoch_s": sum(r.epoch_time for r in reps),
        "final_loss": last.loss if last else None, "final_accuracy": last.accuracy if last else None,
    }


def _print_table(csv_text: str) -> None:
    rows = [line.split(",") for line in csv_text.strip().splitlines()]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))


# --- commands ----------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = load_config(args.config)
    result = run_scheme(cfg.scheme_config(resolve_link(cfg)), client_data(cfg), risk=load_risk(cfg))
    out = output_dir(cfg)
    (out / "rounds.csv").write_text(reports_to_csv(result.reports))
    summary = rows_to_csv([summary_row(cfg, result)], SUMMARY_COLUMNS)
    (out / "summary.csv").write_text(summary)
    if result.model is not None:
        save_model(out / "model.npz", result.model)
    _print_table(summary)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    n_list = sorted(args.n)
    schemes = tuple(args.schemes) if args.schemes else cfg.sweep_schemes
    reports, uploads = scaling_sweep(schemes, n_list, cfg.scheme_config(resolve_link(cfg)),
                                     lambda n: client_data(cfg, n))
    text = rows_to_csv(sweep_rows(reports, uploads))
    (output_dir(cfg) / "sweep.csv").write_text(text)
    _print_table(text)
    return EXIT_OK


def cmd_match(args) -> int:
    risk = RiskMatrix.from_file(args.matrix)
    assignment = match(risk, "greedy" if args.greedy else "exact", cap=args.cap)
    pairs = " ".join(f"({i},{j})" for i, j in assignment.pairs)
    print(f"{pairs} cost {assignment.cost(risk):.3f}")
    return EXIT_OK


def cmd_mnist_info(args) -> int:
    data = load_mnist_idx(args.images, args.labels)
    print(f"samples {len(data)}")
    print(f"shape {'x'.join(str(s) for s in data.samples.shape[1:])}")
    counts = np.bincount(data.labels, minlength=10)
    print("labels " + " ".join(f"{d}:{c}" for d, c in enumerate(counts)))
    print(f"pixel mean {data.samples.mean():.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusefl", description="Secure federated learning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scheme end to end")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="meter a scheme over several client counts")
    s.add_argument("config")
    s.add_argument("--n", type=int, nargs="+", required=True, help="client counts")
    s.add_argument("--schemes", nargs="+", choices=SCHEMES, help="overrides sweep_schemes")
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("match", help="pair clients from a risk matrix file")
    m.add_argument("matrix")
    group = m.add_mutually_exclusive_group()
    group.add_argument("--exact", action="store_true", help="minimum-risk matching (default)")
    group.add_argument("--greedy", action="store_true")
    m.add_argument("--cap", type=int, default=64, help="largest n the exact matcher accepts")
    m.set_defaults(func=cmd_match)

    i = sub.add_parser("mnist-info", help="summarise an IDX image/label pair")
    i.add_argument("images")
    i.add_argument("labels")
    i.set_defaults(func=cmd_mnist_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UnknownArchitecture) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OddClientCount as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FuseFLError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
