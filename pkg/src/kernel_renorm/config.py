"""Experiment configuration read from INI-style key-value files.

Sections and keys (all optional unless noted)::

    [run]      seed, out, threads
    [data]     source (teacher | template | images | file), P, P_test, N0,
               input_scale, teacher, informative, amplitude, offset, path,
               images, labels, target_side, source_side, channels, label_map
    [network]  architecture (fc | lcn | cnn), activation, width, M, S,
               dimensionality, biases
    [hyper]    lambda0, lambda1, beta, alpha, alphas
    [solver]   tol, max_iter, damping, jitter
    [predict]  qbar_scales
    [train]    optimizer, eta, temperature, steps, burn_in, thin, chains,
               dtype, save_snapshots, baseline
    [scaling]  sizes (``P:N1`` pairs), mode (mc | theory)
    [sweep]    channels, mc_channels
    [verify]   include_slow

``width`` is the hidden-layer size ``N1`` for fully-connected networks and the
channel count ``N_c`` otherwise.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import ConvGeometry, Hyperparameters

OUT_ENV = "KERNEL_RENORM_OUT"

_SCHEMA = {
    "run": {"seed", "out", "threads"},
    "data": {"source", "p", "p_test", "n0", "input_scale", "teacher", "informative", "amplitude", "offset", "path", "images", "labels",
             "target_side", "source_side", "channels", "label_map"},
    "network": {"architecture", "activation", "width", "m", "s", "dimensionality", "biases"},
    "hyper": {"lambda0", "lambda1", "beta", "alpha", "alphas"},
    "solver": {"tol", "max_iter", "damping", "jitter"},
    "predict": {"qbar_scales"},
    "train": {"optimizer", "eta", "temperature", "steps", "burn_in", "thin", "chains", "dtype",
              "save_snapshots", "baseline"},
    "scaling": {"sizes", "mode"},
    "sweep": {"channels", "mc_channels"},
    "verify": {"include_slow"},
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class DataSection:
    source: str = "teacher"
    P: int = 64
    P_test: int = 0
    N0: int = 256
    input_scale: float = 1.0
    teacher: str = "ones"
    informative: int = 1
    amplitude: float = 1.0
    offset: float = 0.0
    path: str = ""
    images: str = ""
    labels: str = ""
    target_side: int = 0
    source_side: int = 0
    channels: int = 1
    label_map: str = ""


@dataclass(frozen=True)
class NetworkSection:
    architecture: str = "fc"
    activation: str = "tanh"
    width: int = 64
    M: int = 0
    S: int = 0
    dimensionality: int = 1
    biases: bool = False


@dataclass(frozen=True)
class SolverSection:
    tol: float = 1e-8
    max_iter: int = 10_000
    damping: float = 0.5
    jitter: float = 1e-10


@dataclass(frozen=True)
class TrainSection:
    optimizer: str = "langevin"
    eta: float = 2e-3
    temperature: float = 2e-3
    steps: int = 200_000
    burn_in: int = 50_000
    thin: int = 1000
    chains: int = 8
    dtype: str = "float64"
    save_snapshots: bool = False
    baseline: str = "analytic"


@dataclass(frozen=True)
class Config:
    """Parsed experiment configuration."""

    seed: int = 0
    out: str = ""
    threads: int = 1
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    alphas: tuple = ()
    solver: SolverSection = field(default_factory=SolverSection)
    train: TrainSection = field(default_factory=TrainSection)
    qbar_scales: tuple = ()
    sizes: tuple = ()
    scaling_mode: str = "mc"
    channels: tuple = ()
    mc_channels: tuple = ()
    include_slow: bool = False
    text: str = ""

    # ------------------------------------------------------------ derived
    @property
    def geometry(self) -> ConvGeometry:
        """Patch geometry; fully-connected networks use a single full patch."""
        net, n0 = self.network, self.data.N0
        if net.architecture == "fc":
            return ConvGeometry.single_patch(n0)
        mask = net.M or n0
        return ConvGeometry(n0, mask, net.S or mask, net.dimensionality)

    @property
    def n1(self) -> int:
        """Hidden-layer size ``N1`` (``N_c`` times the patch count for local architectures)."""
        return self.network.width * self.geometry.patch_count

    @property
    def alpha(self) -> float:
        """Load ``P / N1`` (FC) or ``P / N_c`` (LCN, CNN) unless ``[hyper] alpha`` is given."""
        return self.hyper.alpha

    @property
    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get(OUT_ENV, "") or "results")

    @property
    def config_hash(self) -> str:
        """Hash of the effective configuration (after overrides, before defaults)."""
        return hashlib.sha256(canonical_text(self).encode()).hexdigest()[:16]

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       threads: int | None = None) -> "Config":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if out is not None:
            cfg = replace(cfg, out=str(out))
        if threads is not None:
            if threads < 1:
                raise ConfigError("--threads must be at least 1")
            cfg = replace(cfg, threads=int(threads))
        return cfg


def canonical_text(cfg: Config) -> str:
    """Deterministic text of every setting that can change results (not output location or threads)."""
    parts = [f"seed={cfg.seed}"]
    for name in ("data", "network", "hyper", "solver", "train"):
        parts.append(f"{name}={getattr(cfg, name)!r}")
    for name in ("alphas", "qbar_scales", "sizes", "scaling_mode", "channels", "mc_channels", "include_slow"):
        parts.append(f"{name}={getattr(cfg, name)!r}")
    return "\n".join(parts)


# ---------------------------------------------------------------- parsing

def _float(value: str) -> float:
    v = value.strip().lower()
    if v in ("inf", "infinity", "+inf"):
        return float("inf")
    return float(v)


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _list(value: str, conv) -> tuple:
    items = [s for s in value.replace(";", ",").split(",") if s.strip()]
    return tuple(conv(s.strip()) for s in items)


def _pair(value: str) -> tuple:
    p, n = value.split(":")
    return int(p), int(n)


def _get(parser, section, key, conv, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        return conv(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None


def parse_config(text: str) -> Config:
    """Parse configuration text; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from None
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(parser.options(section)) - _SCHEMA[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")

    g = lambda s, k, conv, d: _get(parser, s, k, conv, d)  # noqa: E731
    dd, nd, sd, td = DataSection(), NetworkSection(), SolverSection(), TrainSection()
    data = DataSection(
        source=g("data", "source", str, dd.source).lower(),
        P=g("data", "p", int, dd.P), P_test=g("data", "p_test", int, dd.P_test),
        N0=g("data", "n0", int, dd.N0), input_scale=g("data", "input_scale", _float, dd.input_scale),
        teacher=g("data", "teacher", str, dd.teacher),
        informative=g("data", "informative", int, dd.informative),
        amplitude=g("data", "amplitude", _float, dd.amplitude), offset=g("data", "offset", _float, dd.offset),
        path=g("data", "path", str, dd.path),
        images=g("data", "images", str, dd.images), labels=g("data", "labels", str, dd.labels),
        target_side=g("data", "target_side", int, dd.target_side),
        source_side=g("data", "source_side", int, dd.source_side),
        channels=g("data", "channels", int, dd.channels), label_map=g("data", "label_map", str, dd.label_map))
    network = NetworkSection(
        architecture=g("network", "architecture", str, nd.architecture).lower(),
        activation=g("network", "activation", str, nd.activation).lower(),
        width=g("network", "width", int, nd.width), M=g("network", "m", int, nd.M),
        S=g("network", "s", int, nd.S), dimensionality=g("network", "dimensionality", int, nd.dimensionality),
        biases=g("network", "biases", _bool, nd.biases))
    alpha = g("hyper", "alpha", _float, None)
    if alpha is None:
        alpha = data.P / max(network.width, 1)
    try:
        hyper = Hyperparameters(g("hyper", "lambda0", _float, 1.0), g("hyper", "lambda1", _float, 1.0),
                                g("hyper", "beta", _float, float("inf")), alpha)
    except ValueError as exc:
        raise ConfigError(f"[hyper] {exc}") from None
    solver = SolverSection(g("solver", "tol", _float, sd.tol), g("solver", "max_iter", int, sd.max_iter),
                           g("solver", "damping", _float, sd.damping), g("solver", "jitter", _float, sd.jitter))
    train = TrainSection(
        optimizer=g("train", "optimizer", str, td.optimizer).lower(), eta=g("train", "eta", _float, td.eta),
        temperature=g("train", "temperature", _float, td.temperature), steps=g("train", "steps", int, td.steps),
        burn_in=g("train", "burn_in", int, td.burn_in), thin=g("train", "thin", int, td.thin),
        chains=g("train", "chains", int, td.chains), dtype=g("train", "dtype", str, td.dtype),
        save_snapshots=g("train", "save_snapshots", _bool, td.save_snapshots),
        baseline=g("train", "baseline", str, td.baseline).lower())
    cfg = Config(
        seed=g("run", "seed", int, 0), out=g("run", "out", str, ""), threads=g("run", "threads", int, 1),
        data=data, network=network, hyper=hyper, solver=solver, train=train,
        alphas=g("hyper", "alphas", lambda v: _list(v, _float), ()),
        qbar_scales=g("predict", "qbar_scales", lambda v: _list(v, _float), ()),
        sizes=g("scaling", "sizes", lambda v: _list(v, _pair), ()),
        scaling_mode=g("scaling", "mode", str, "mc").lower(),
        channels=g("sweep", "channels", lambda v: _list(v, int), ()),
        mc_channels=g("sweep", "mc_channels", lambda v: _list(v, int), ()),
        include_slow=g("verify", "include_slow", _bool, False),
        text=text)
    validate(cfg)
    return cfg


def load_config(path) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from None
    return parse_config(text)


def validate(cfg: Config) -> None:
    d, n, t = cfg.data, cfg.network, cfg.train
    if d.source not in ("teacher", "template", "images", "file"):
        raise ConfigError(f"[data] source must be teacher, template, images or file, got {d.source!r}")
    if d.P < 1 or d.P_test < 0 or d.N0 < 1:
        raise ConfigError("[data] needs P >= 1, P_test >= 0 and N0 >= 1")
    if not np.isfinite(d.input_scale) or d.input_scale <= 0:
        raise ConfigError("[data] input_scale must be positive")
    if n.architecture not in ("fc", "lcn", "cnn"):
        raise ConfigError(f"[network] architecture must be fc, lcn or cnn, got {n.architecture!r}")
    if n.activation not in ("linear", "erf", "tanh"):
        raise ConfigError(f"[network] activation must be linear, erf or tanh, got {n.activation!r}")
    if n.width < 1:
        raise ConfigError("[network] width must be at least 1")
    try:
        cfg.geometry
    except ValueError as exc:
        raise ConfigError(f"[network] geometry: {exc}") from None
    if t.optimizer not in ("langevin", "gd", "adam"):
        raise ConfigError(f"[train] optimizer must be langevin, gd or adam, got {t.optimizer!r}")
    if t.eta <= 0 or t.temperature < 0 or t.steps < 1 or t.thin < 1 or t.chains < 1:
        raise ConfigError("[train] needs eta > 0, temperature >= 0, steps, thin and chains >= 1")
    if not 0 <= t.burn_in < t.steps:
        raise ConfigError("[train] burn_in must lie in [0, steps)")
    if t.dtype not in ("float64", "float32"):
        raise ConfigError("[train] dtype must be float64 or float32")
    if t.baseline not in ("analytic", "initial"):
        raise ConfigError("[train] baseline must be analytic or initial")
    if not 0 < cfg.solver.damping <= 1 or cfg.solver.tol <= 0 or cfg.solver.max_iter < 1:
        raise ConfigError("[solver] needs 0 < damping <= 1, tol > 0 and max_iter >= 1")
    if cfg.scaling_mode not in ("mc", "theory"):
        raise ConfigError("[scaling] mode must be mc or theory")
    if any(a < 0 for a in cfg.alphas):
        raise ConfigError("[hyper] alphas must be non-negative")
    if any(s <= 0 for s in cfg.qbar_scales):
        raise ConfigError("[predict] qbar_scales must be positive")
    if any(c < 1 for c in cfg.channels + cfg.mc_channels):
        raise ConfigError("[sweep] channel counts must be positive")
    if cfg.threads < 1:
        raise ConfigError("[run] threads must be at least 1")
