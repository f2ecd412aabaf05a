"""Experiment pipelines behind the command-line interface.

Every runner takes a :class:`~kernel_renorm.config.Config` and returns one or
more :class:`ExperimentRecord` tables. Records are written as UTF-8 CSV with a
short ``#``-comment header carrying the schema version, tool version, config
hash and timestamp.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .config import Config, ConfigError
from .data import (ConvGeometry, Dataset, generate_linear_teacher, generate_patch_template, load_dataset,
                   load_grayscale_images, split)
from .kernels import (LocalKernel, global_covariance, kernel_matrix, load_kernel, local_covariance,
                      local_kernel, save_kernel, test_kernel_vectors)
from .oracle import (Network, TrainConfig, block_statistics,
                     block_statistics_with_errors, forward, measure_similarity, mc_standard_error,
                     sample_posterior, save_snapshots)
from .predictor import predict, renormalize_test_vector, theory_delta_k_cnn, theory_delta_k_fc
from .saddle import SaddleSolution, renormalize, solve_saddle

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

TABLES = {
    "solve": ("config_hash", "architecture", "alpha", "beta", "lambda0", "lambda1", "geometry", "patches",
              "converged", "residual", "iterations", "min_eigenvalue", "jitter", "qbar_trace", "qbar"),
    "predict": ("config_hash", "test_index", "architecture", "alpha", "seed", "qbar_scale", "y0", "gamma",
                "sigma2", "gen_error"),
    "simulate": ("config_hash", "architecture", "P", "width", "n1", "block", "count", "mc_mean", "mc_mean_se",
                 "mc_variance", "mc_variance_se", "theory_mean", "theory_variance", "band_mean",
                 "band_variance", "agree_mean", "agree_variance", "n_snapshots", "chains", "baseline"),
    "simulate_chains": ("config_hash", "chain", "final_loss", "late_burn_in_mean", "sampling_mean",
                        "relative_drift", "test_loss_mean", "test_loss_se", "n_snapshots"),
    "scaling": ("config_hash", "architecture", "mode", "P", "width", "n1", "alpha", "converged",
                "theory_mean_11", "theory_var_01", "mc_mean_11", "mc_mean_11_se", "mc_var_01", "mc_var_01_se",
                "n_snapshots", "diagonal_excluded"),
    "scaling_fit": ("config_hash", "architecture", "quantity", "source", "n_points", "slope", "slope_se",
                    "intercept", "residual_rms", "residuals", "status"),
    "channel_sweep": ("config_hash", "architecture", "channels", "n1", "alpha", "converged", "theory_loss",
                      "theory_se", "infinite_width_loss", "infinite_width_se", "mc_loss", "mc_sd", "mc_se",
                      "n_mc_samples"),
    "verify": ("config_hash", "check", "module", "invariant", "observed", "threshold", "passed", "detail"),
}


class SchemaError(ValueError):
    """A results file does not match the expected table schema."""


class FitError(ValueError):
    """A slope fit was requested over too few points."""


class NumericalFailure(RuntimeError):
    """A solve or simulation failed numerically; the partial record is attached."""

    def __init__(self, message, records=()):
        super().__init__(message)
        self.records = list(records)


# ---------------------------------------------------------------- records

def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


@dataclass
class ExperimentRecord:
    """One result table with its configuration snapshot and provenance."""

    table: str
    rows: list
    config_text: str = ""
    config_hash: str = ""
    tool_version: str = __version__
    timestamp: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.table not in TABLES:
            raise SchemaError(f"unknown table {self.table!r}")
        if not self.timestamp:
            self.timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        cols = set(TABLES[self.table])
        for k, row in enumerate(self.rows):
            if set(row) != cols:
                raise SchemaError(f"{self.table} row {k}: columns {sorted(set(row) ^ cols)} do not match schema")

    @property
    def columns(self) -> tuple:
        return TABLES[self.table]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema = {self.table} v{SCHEMA_VERSION}\n")
        buf.write(f"# tool_version = {self.tool_version}\n")
        buf.write(f"# timestamp = {self.timestamp}\n")
        buf.write(f"# config_hash = {self.config_hash}\n")
        for key, value in self.metadata.items():
            buf.write(f"# {key} = {_fmt(value)}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_fmt(row[c]) for c in self.columns])
        return buf.getvalue()

    def write(self, out_dir, stem: str | None = None) -> Path:
        """Write ``<stem>.csv`` and the configuration snapshot ``<stem>.config.ini``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or self.table
        path = out_dir / f"{stem}.csv"
        path.write_text(self.to_csv(), encoding="utf-8")
        if self.config_text:
            (out_dir / f"{stem}.config.ini").write_text(self.config_text, encoding="utf-8")
        return path

    @classmethod
    def read(cls, path, table: str | None = None) -> "ExperimentRecord":
        """Parse a results file; values stay strings. Schema mismatches raise :class:`SchemaError`."""
        text = Path(path).read_text(encoding="utf-8")
        meta, body = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                meta[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
        schema = meta.pop("schema", "")
        name, _, version = schema.partition(" v")
        if name not in TABLES:
            raise SchemaError(f"{path}: unknown or missing schema line {schema!r}")
        if table is not None and name != table:
            raise SchemaError(f"{path}: expected table {table!r}, found {name!r}")
        if version != str(SCHEMA_VERSION):
            raise SchemaError(f"{path}: schema version {version!r}, expected {SCHEMA_VERSION}")
        reader = csv.reader(body)
        header = tuple(next(reader, ()))
        if header != TABLES[name]:
            raise SchemaError(f"{path}: columns {header} do not match schema {TABLES[name]}")
        raw = list(reader)
        if any(len(r) != len(header) for r in raw):
            raise SchemaError(f"{path}: a row has a different number of fields than the header")
        rows = [dict(zip(header, r)) for r in raw]
        return cls(name, rows, "", meta.pop("config_hash", ""), meta.pop("tool_version", ""),
                   meta.pop("timestamp", ""), meta)


def _record(cfg: Config, table: str, rows: list, **metadata) -> ExperimentRecord:
    h = cfg.config_hash
    for row in rows:
        row["config_hash"] = h
    return ExperimentRecord(table, rows, cfg.text, h, metadata={"seed": cfg.seed, **metadata})


# ---------------------------------------------------------------- shared pipeline pieces

def geometry_label(geometry: ConvGeometry) -> str:
    return f"N0={geometry.n0} M={geometry.mask} S={geometry.stride} d={geometry.dimensionality}"


def _label_map(text: str) -> dict | None:
    if not text:
        return None
    out = {}
    for item in text.split(","):
        key, _, value = item.partition(":")
        out[key.strip()] = float(value)
    return out


def _template_geometry(cfg: Config) -> ConvGeometry:
    """Patch layout of the synthetic template for FC runs, taken from ``[network] M, S``."""
    net = cfg.network
    if not net.M:
        raise ConfigError("[data] source = template needs [network] M to place the template")
    return ConvGeometry(cfg.data.N0, net.M, net.S or net.M, net.dimensionality)


def build_dataset(cfg: Config, n_train: int | None = None, n_test: int | None = None) -> tuple[Dataset, Dataset]:
    """Training and test sets described by ``[data]``, inputs multiplied by ``input_scale``."""
    d = cfg.data
    p = d.P if n_train is None else n_train
    t = d.P_test if n_test is None else n_test
    try:
        if d.source == "teacher":
            teacher = None if d.teacher == "ones" else np.loadtxt(d.teacher, ndmin=1)
            full = generate_linear_teacher(p + t, d.N0, cfg.seed, teacher)
        elif d.source == "template":
            geo = cfg.geometry if cfg.network.architecture != "fc" else _template_geometry(cfg)
            full = generate_patch_template(p + t, geo, d.informative, d.amplitude, d.offset, cfg.seed)
        elif d.source == "images":
            full = load_grayscale_images(d.images, d.target_side, d.labels, d.source_side or None, d.channels,
                                         _label_map(d.label_map))
        else:
            full = load_dataset(d.path, d.labels)
    except OSError as exc:
        raise ConfigError(f"[data] {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"[data] {exc}") from None
    if full.input_dim != d.N0:
        raise ConfigError(f"[data] N0 = {d.N0} but the data have {full.input_dim} coordinates")
    if full.n_patterns < p + t:
        raise ConfigError(f"[data] need {p + t} patterns, only {full.n_patterns} available")
    if d.input_scale != 1.0:
        full = Dataset(full.inputs * d.input_scale, full.labels, full.name)
    train, rest = split(full.subset(np.arange(p + t)), p)
    return train, rest


def compute_kernel(arch: str, data: Dataset, geometry: ConvGeometry, activation: str, lambda0: float,
                   threads: int = 1) -> LocalKernel:
    """Analytic kernel of the architecture (a single-patch local kernel for FC)."""
    if arch == "fc":
        k = kernel_matrix(global_covariance(data, lambda0), activation, threads=threads)
        return LocalKernel.from_global(k, activation, lambda0)
    return local_kernel(local_covariance(data, geometry, lambda0), activation, threads=threads)


def kernel_cache_path(cfg: Config) -> Path:
    key = repr((cfg.data, cfg.seed, cfg.network.architecture == "fc", cfg.geometry, cfg.network.activation,
                cfg.hyper.lambda0))
    return cfg.out_dir / "cache" / f"kernel-{hashlib.sha256(key.encode()).hexdigest()[:16]}.krn"


def cached_kernel(cfg: Config, train: Dataset) -> LocalKernel:
    path = kernel_cache_path(cfg)
    if path.exists():
        lk = load_kernel(path)
        if lk.n_patterns == train.n_patterns:
            return lk
        log.warning("kernel cache %s does not match the dataset; recomputing", path)
    return compute_kernel(cfg.network.architecture, train, cfg.geometry, cfg.network.activation,
                          cfg.hyper.lambda0, cfg.threads)


def prior_similarity(lk: LocalKernel) -> np.ndarray:
    """Prior mean of the similarity matrix: the patch average of ``K^{ii}``."""
    return lk.diagonal.mean(axis=0)


def theory_similarity_shift(arch: str, lk: LocalKernel, y, qbar, lambda1: float, n1: int,
                            jitter: float = 1e-10) -> np.ndarray:
    """Zero-temperature ``Delta K`` for the architecture at the given order parameters."""
    if arch == "fc":
        return theory_delta_k_fc(lk.block(0, 0), y, float(np.squeeze(qbar)), lambda1, n1)
    if arch == "lcn":
        lk = lk.without_cross_patch()
        qbar = np.diag(np.diag(np.atleast_2d(qbar)))
    k_r = renormalize("cnn", lk, qbar, lambda1)
    return theory_delta_k_cnn(lk, qbar, k_r, y, lambda1, n1, jitter)


def solve(cfg: Config, arch: str, lk: LocalKernel, y, alpha: float) -> SaddleSolution:
    s = cfg.solver
    return solve_saddle(arch, lk, y, alpha, cfg.hyper.beta, cfg.hyper.lambda1, s.tol, s.max_iter, s.damping,
                        s.jitter, lambda0=cfg.hyper.lambda0, geometry=geometry_label(cfg.geometry))


def train_config(cfg: Config, seed: int | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.eta, t.temperature, t.steps, t.burn_in, t.thin, t.optimizer,
                       cfg.seed if seed is None else seed)


@dataclass
class TestLoss:
    mean: float
    se: float
    per_point: np.ndarray


def theory_test_loss(arch: str, lk: LocalKernel, train: Dataset, test: Dataset, geometry: ConvGeometry,
                     activation: str, lambda0: float, lambda1: float, beta: float, qbar,
                     jitter: float = 1e-10, threads: int = 1, tkv=None) -> TestLoss:
    """Mean generalization error over the test set at order parameters ``qbar``.

    ``tkv`` may carry precomputed test kernel vectors; they do not depend on ``qbar``.
    """
    if tkv is None:
        geo = None if arch == "fc" else geometry
        tkv = test_kernel_vectors(train, test.inputs, geo, activation, lambda0, threads=threads)
    qbar = np.atleast_2d(np.asarray(qbar, dtype=float))
    k_r = renormalize(arch, lk, qbar, lambda1)
    kr, k0r = renormalize_test_vector(arch, tkv, qbar, lambda1)
    st = predict(k_r, kr, k0r, train.labels, test.labels, beta, jitter)
    g = np.atleast_1d(st.gen_error)
    se = float(g.std(ddof=1) / np.sqrt(g.size)) if g.size > 1 else float("nan")
    return TestLoss(float(g.mean()), se, g)


# ---------------------------------------------------------------- Monte Carlo pipeline

@dataclass
class SimulationResult:
    """Monte-Carlo block statistics next to the theory for one network size."""

    architecture: str
    P: int
    width: int
    n1: int
    solution: SaddleSolution
    theory: dict
    mc: dict
    n_snapshots: int
    chains: int
    logs: list
    test_losses: dict
    baseline: str

    def band(self, block: str, which: str) -> float:
        """Combined one-sigma band: MC standard error and a relative ``1/N1`` theory band."""
        th = self.theory[block].mean if which == "mean" else self.theory[block].variance
        se = self.mc[block][f"{which}_se" if which == "mean" else "variance_se"]
        return float(np.hypot(se, abs(th) / self.n1))

    def agrees(self, block: str, which: str, bands: float = 3.0) -> bool:
        th = self.theory[block].mean if which == "mean" else self.theory[block].variance
        mc = self.mc[block]["mean" if which == "mean" else "variance"]
        return bool(abs(mc - th) <= bands * self.band(block, which))


def simulate(arch: str, train: Dataset, geometry: ConvGeometry, width: int, activation: str, lambda0: float,
             lambda1: float, beta: float, tc: TrainConfig, chains: int, lk: LocalKernel | None = None,
             test: Dataset | None = None, baseline: str = "analytic", dtype=np.float64,
             solver_opts: dict | None = None, snapshot_path=None, threads: int = 1) -> SimulationResult:
    """Sample the Gibbs posterior and compare block statistics of ``Delta K`` with the theory."""
    net = Network(arch, train.input_dim, width, None if arch == "fc" else geometry, activation)
    if lk is None:
        lk = compute_kernel(arch, train, geometry, activation, lambda0, threads)
    alpha = train.n_patterns / width
    sol = solve_saddle(arch, lk, train.labels, alpha, beta, lambda1, **(solver_opts or {}))
    theory = block_statistics(theory_similarity_shift(arch, lk, train.labels, sol.qbar, lambda1, net.n1),
                              train.labels)
    sampler = sample_posterior(net, train, lambda0, lambda1, tc, chains=chains,
                               include_initial=baseline == "initial",
                               extra_inputs=None if test is None else test.inputs, dtype=dtype)
    test_losses: dict = {c: [] for c in range(chains)}
    kept = []

    def stream():
        for snap in sampler:
            if test is not None and test.n_patterns and snap.step > 0:
                f = forward(net, snap, test.inputs)
                test_losses[snap.chain].append(float(np.mean((test.labels - f) ** 2)))
            if snapshot_path is not None:
                kept.append(snap)
            yield snap

    est = measure_similarity(stream(), train, prior_similarity(lk), baseline)
    if snapshot_path is not None:
        save_snapshots(snapshot_path, kept)
    mc = block_statistics_with_errors(est, train.labels)
    return SimulationResult(arch, train.n_patterns, width, net.n1, sol, theory, mc, est.n_snapshots, chains,
                            sampler.logs, {c: np.array(v) for c, v in test_losses.items()}, baseline)


def _chain_rows(res: SimulationResult, burn_in: int) -> list:
    rows = []
    for c, lg in enumerate(res.logs):
        plateau = lg.plateau(burn_in)
        tl = res.test_losses.get(c, np.array([]))
        rows.append({"chain": c, "final_loss": lg.final_loss, "late_burn_in_mean": plateau["late_burn_in_mean"],
                     "sampling_mean": plateau["sampling_mean"], "relative_drift": plateau["relative_drift"],
                     "test_loss_mean": float(tl.mean()) if tl.size else float("nan"),
                     "test_loss_se": mc_standard_error(tl) if tl.size > 1 else float("nan"),
                     "n_snapshots": int(tl.size) if tl.size else res.n_snapshots // max(res.chains, 1)})
    return rows


def _block_rows(res: SimulationResult) -> list:
    rows = []
    for block in ("00", "01", "11"):
        th, mc = res.theory[block], res.mc[block]
        rows.append({"architecture": res.architecture, "P": res.P, "width": res.width, "n1": res.n1,
                     "block": block, "count": th.count, "mc_mean": mc["mean"], "mc_mean_se": mc["mean_se"],
                     "mc_variance": mc["variance"], "mc_variance_se": mc["variance_se"],
                     "theory_mean": th.mean, "theory_variance": th.variance,
                     "band_mean": res.band(block, "mean") if th.present else float("nan"),
                     "band_variance": res.band(block, "variance") if th.present else float("nan"),
                     "agree_mean": res.agrees(block, "mean") if th.present else False,
                     "agree_variance": res.agrees(block, "variance") if th.present else False,
                     "n_snapshots": res.n_snapshots, "chains": res.chains, "baseline": res.baseline})
    return rows


# ---------------------------------------------------------------- fits

@dataclass(frozen=True)
class SlopeFit:
    slope: float
    slope_se: float
    intercept: float
    residuals: tuple

    @property
    def residual_rms(self) -> float:
        r = np.asarray(self.residuals)
        return float(np.sqrt(np.mean(r ** 2))) if r.size else float("nan")


def fit_loglog(x, y) -> SlopeFit:
    """Unweighted least-squares line through ``(log x, log y)``; needs three or more positive points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise FitError(f"slope fit needs at least 3 points, got {x.size}")
    if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise FitError("log-log fit needs positive finite values")
    lx, ly = np.log(x), np.log(y)
    res = stats.linregress(lx, ly)
    resid = ly - (res.intercept + res.slope * lx)
    return SlopeFit(float(res.slope), float(res.stderr), float(res.intercept), tuple(float(r) for r in resid))


def _fit_row(arch, quantity, source, x, y) -> dict:
    row = {"architecture": arch, "quantity": quantity, "source": source, "n_points": 0, "slope": float("nan"),
           "slope_se": float("nan"), "intercept": float("nan"), "residual_rms": float("nan"), "residuals": "",
           "status": "ok"}
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    keep = np.isfinite(y) & (y > 0)
    row["n_points"] = int(keep.sum())
    try:
        fit = fit_loglog(x[keep], y[keep])
    except FitError as exc:
        dropped = int((~keep).sum())
        row["status"] = f"refused: {exc}" + (f" ({dropped} non-positive values dropped)" if dropped else "")
        return row
    row.update(slope=fit.slope, slope_se=fit.slope_se, intercept=fit.intercept, residual_rms=fit.residual_rms,
               residuals=" ".join(_fmt(r) for r in fit.residuals))
    return row


# ---------------------------------------------------------------- commands

def run_kernel(cfg: Config) -> tuple[Path, bool]:
    """Write the kernel cache; returns ``(path, skipped)``."""
    path = kernel_cache_path(cfg)
    if path.exists():
        log.info("kernel cache %s already present; skipping", path)
        return path, True
    train, _ = build_dataset(cfg)
    lk = compute_kernel(cfg.network.architecture, train, cfg.geometry, cfg.network.activation,
                        cfg.hyper.lambda0, cfg.threads)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_kernel(path, lk)
    log.info("kernel written to %s", path)
    return path, False


def _solution_row(sol: SaddleSolution, cfg: Config) -> dict:
    return {"architecture": sol.architecture, "alpha": sol.alpha, "beta": sol.beta,
            "lambda0": cfg.hyper.lambda0, "lambda1": sol.lambda1, "geometry": geometry_label(cfg.geometry),
            "patches": sol.n_patches, "converged": sol.converged, "residual": sol.residual,
            "iterations": sol.iterations, "min_eigenvalue": sol.min_eigenvalue, "jitter": sol.jitter,
            "qbar_trace": float(np.trace(sol.qbar)), "qbar": " ".join(_fmt(v) for v in sol.qbar.ravel())}


def run_solve(cfg: Config) -> tuple[ExperimentRecord, list]:
    """Solve the saddle point for each load in ``[hyper] alphas`` (or the single configured load)."""
    train, _ = build_dataset(cfg)
    lk = cached_kernel(cfg, train)
    alphas = cfg.alphas or (cfg.alpha,)
    arch = cfg.network.architecture
    with ThreadPoolExecutor(max_workers=min(cfg.threads, len(alphas))) as pool:
        sols = list(pool.map(lambda a: solve(cfg, arch, lk, train.labels, a), alphas))
    rec = _record(cfg, "solve", [_solution_row(s, cfg) for s in sols])
    return rec, sols


def run_predict(cfg: Config) -> tuple[ExperimentRecord, SaddleSolution | None]:
    """Predictor statistics on the test set at the saddle (optionally at rescaled ``Qbar``)."""
    train, test = build_dataset(cfg)
    arch = cfg.network.architecture
    if test.n_patterns == 0:
        return _record(cfg, "predict", [], note="empty test set"), None
    lk = cached_kernel(cfg, train)
    sol = solve(cfg, arch, lk, train.labels, cfg.alpha)
    geo = None if arch == "fc" else cfg.geometry
    tkv = test_kernel_vectors(train, test.inputs, geo, cfg.network.activation, cfg.hyper.lambda0,
                              threads=cfg.threads)
    rows = []
    for scale in cfg.qbar_scales or (1.0,):
        qbar = scale * sol.qbar
        k_r = renormalize(arch, lk, qbar, cfg.hyper.lambda1)
        kr, k0r = renormalize_test_vector(arch, tkv, qbar, cfg.hyper.lambda1)
        st = predict(k_r, kr, k0r, train.labels, test.labels, cfg.hyper.beta, cfg.solver.jitter)
        for t in range(test.n_patterns):
            rows.append({"test_index": t, "architecture": arch, "alpha": cfg.alpha, "seed": cfg.seed,
                         "qbar_scale": scale, "y0": float(test.labels[t]), "gamma": float(st.gamma[t]),
                         "sigma2": float(st.sigma2[t]), "gen_error": float(st.gen_error[t])})
    return _record(cfg, "predict", rows, saddle_converged=sol.converged), sol


def run_simulate(cfg: Config) -> tuple[list, SimulationResult]:
    """Langevin (or optimizer) run with block statistics of the similarity shift against the theory."""
    train, test = build_dataset(cfg)
    arch = cfg.network.architecture
    lk = cached_kernel(cfg, train)
    snap_path = None
    if cfg.train.save_snapshots:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        snap_path = cfg.out_dir / "snapshots.bin"
    res = simulate(arch, train, cfg.geometry, cfg.network.width, cfg.network.activation, cfg.hyper.lambda0,
                   cfg.hyper.lambda1, cfg.hyper.beta, train_config(cfg), cfg.train.chains, lk, test,
                   cfg.train.baseline, np.dtype(cfg.train.dtype).type, _solver_opts(cfg), snap_path, cfg.threads)
    meta = {"saddle_converged": res.solution.converged, "diagonal_excluded": True,
            "temperature": cfg.train.temperature, "beta": cfg.hyper.beta}
    return [_record(cfg, "simulate", _block_rows(res), **meta),
            _record(cfg, "simulate_chains", _chain_rows(res, cfg.train.burn_in))], res


def _solver_opts(cfg: Config) -> dict:
    s = cfg.solver
    return {"tol": s.tol, "max_iter": s.max_iter, "damping": s.damping, "zero_temp_jitter": s.jitter}


def run_scaling(cfg: Config) -> tuple[ExperimentRecord, ExperimentRecord, list]:
    """Finite-size scaling of the block statistics over ``[scaling] sizes``."""
    if len(cfg.sizes) < 3:
        raise ConfigError(f"[scaling] sizes: a slope fit needs at least 3 sizes, got {len(cfg.sizes)}")
    arch = cfg.network.architecture
    rows, results = [], []
    reference = None
    for p, width in cfg.sizes:
        c = replace(cfg, data=replace(cfg.data, P=p, P_test=0), network=replace(cfg.network, width=width))
        train, _ = build_dataset(c)
        n1 = c.n1
        row = {"architecture": arch, "mode": cfg.scaling_mode, "P": p, "width": width, "n1": n1,
               "alpha": p / width, "diagonal_excluded": True, "mc_mean_11": float("nan"),
               "mc_mean_11_se": float("nan"), "mc_var_01": float("nan"), "mc_var_01_se": float("nan"),
               "n_snapshots": 0}
        if cfg.scaling_mode == "theory":
            # fixed reference matrix scaled by 1/N1
            if reference is None:
                lk = compute_kernel(arch, train, c.geometry, c.network.activation, c.hyper.lambda0, c.threads)
                sol = solve(c, arch, lk, train.labels, p / width)
                reference = (theory_similarity_shift(arch, lk, train.labels, sol.qbar, c.hyper.lambda1, n1) * n1,
                             train.labels, sol.converged)
            dk = reference[0] / n1
            th = block_statistics(dk, reference[1])
            row.update(converged=reference[2], theory_mean_11=th["11"].mean, theory_var_01=th["01"].variance)
        else:
            res = simulate(arch, train, c.geometry, width, c.network.activation, c.hyper.lambda0, c.hyper.lambda1,
                           c.hyper.beta, train_config(c), c.train.chains, baseline=c.train.baseline,
                           dtype=np.dtype(c.train.dtype).type, solver_opts=_solver_opts(c), threads=c.threads)
            results.append(res)
            row.update(converged=res.solution.converged, theory_mean_11=res.theory["11"].mean,
                       theory_var_01=res.theory["01"].variance, mc_mean_11=res.mc["11"]["mean"],
                       mc_mean_11_se=res.mc["11"]["mean_se"], mc_var_01=res.mc["01"]["variance"],
                       mc_var_01_se=res.mc["01"]["variance_se"], n_snapshots=res.n_snapshots)
        rows.append(row)
        if not row["converged"]:
            log.warning("saddle point not converged at P=%d width=%d", p, width)
    n1s = [r["n1"] for r in rows]
    fits = [_fit_row(arch, "var_01", "theory", n1s, [r["theory_var_01"] for r in rows]),
            _fit_row(arch, "abs_mean_11", "theory", n1s, [abs(r["theory_mean_11"]) for r in rows])]
    if cfg.scaling_mode == "mc":
        fits += [_fit_row(arch, "var_01", "mc", n1s, [r["mc_var_01"] for r in rows]),
                 _fit_row(arch, "abs_mean_11", "mc", n1s, [abs(r["mc_mean_11"]) for r in rows])]
    meta = {"diagonal_excluded": True, "fit": "unweighted least squares on log-log points"}
    return _record(cfg, "scaling", rows, **meta), _record(cfg, "scaling_fit", fits, **meta), results


def run_channel_sweep(cfg: Config) -> tuple[ExperimentRecord, dict]:
    """Theory test loss against the channel count, with FC and infinite-width references and MC spot checks."""
    if not cfg.channels:
        raise ConfigError("[sweep] channels is empty")
    if cfg.network.architecture == "fc":
        raise ConfigError("[network] the channel sweep needs a local architecture (cnn or lcn)")
    if cfg.data.P_test < 1:
        raise ConfigError("[data] the channel sweep needs a test set (P_test >= 1)")
    arch = cfg.network.architecture
    train, test = build_dataset(cfg)
    geo, act, h = cfg.geometry, cfg.network.activation, cfg.hyper
    n = geo.patch_count
    lk = cached_kernel(cfg, train)
    lk_fc = compute_kernel("fc", train, ConvGeometry.single_patch(train.input_dim), act, h.lambda0, cfg.threads)
    tkv = {arch: test_kernel_vectors(train, test.inputs, geo, act, h.lambda0, threads=cfg.threads),
           "fc": test_kernel_vectors(train, test.inputs, None, act, h.lambda0, threads=cfg.threads)}

    def loss(a, k, q):
        return theory_test_loss(a, k, train, test, geo, act, h.lambda0, h.lambda1, h.beta, q, cfg.solver.jitter,
                                cfg.threads, tkv[a])

    inf_local = loss(arch, lk, np.eye(n))
    inf_fc = loss("fc", lk_fc, np.eye(1))
    rows, curves = [], {"cnn": [], "fc": []}
    for nc in cfg.channels:
        for a, k, width, ref in ((arch, lk, nc, inf_local), ("fc", lk_fc, nc * n, inf_fc)):
            alpha = train.n_patterns / width
            sol = solve(cfg, a, k, train.labels, alpha)
            tl = loss(a, k, sol.qbar)
            row = {"architecture": a, "channels": nc, "n1": nc * n, "alpha": alpha, "converged": sol.converged,
                   "theory_loss": tl.mean, "theory_se": tl.se, "infinite_width_loss": ref.mean,
                   "infinite_width_se": ref.se, "mc_loss": float("nan"), "mc_sd": float("nan"),
                   "mc_se": float("nan"), "n_mc_samples": 0}
            if a == arch and nc in cfg.mc_channels:
                res = simulate(a, train, geo, nc, act, h.lambda0, h.lambda1, h.beta, train_config(cfg),
                               cfg.train.chains, k, test, dtype=np.dtype(cfg.train.dtype).type,
                               solver_opts=_solver_opts(cfg), threads=cfg.threads)
                losses = np.concatenate([v for v in res.test_losses.values() if v.size])
                chain_means = np.array([v.mean() for v in res.test_losses.values() if v.size])
                row.update(mc_loss=float(losses.mean()), mc_sd=float(losses.std(ddof=1)),
                           mc_se=float(chain_means.std(ddof=1) / np.sqrt(chain_means.size))
                           if chain_means.size > 1 else float("nan"),
                           n_mc_samples=int(losses.size))
            rows.append(row)
            curves["cnn" if a == arch else "fc"].append(row)
    meta = {"geometry": geometry_label(geo), "fc_width": "channels x patches"}
    return _record(cfg, "channel_sweep", rows, **meta), curves


def sweep_shape(curves: dict) -> dict:
    """Qualitative checks of a channel sweep: FC monotonicity and the local-architecture dip."""
    fc = curves["fc"]
    fc_losses = np.array([r["theory_loss"] for r in sorted(fc, key=lambda r: r["n1"])])
    fc_ok = bool(np.all(np.diff(fc_losses) <= 1e-12 * np.abs(fc_losses[:-1]).max()))
    loc = curves["cnn"]
    best = min(loc, key=lambda r: r["theory_loss"])
    counts = [r["channels"] for r in loc]
    gap = best["infinite_width_loss"] - best["theory_loss"]
    combined = float(np.hypot(best["theory_se"], best["infinite_width_se"]))
    return {"fc_non_increasing": fc_ok, "best_channels": best["channels"], "best_loss": best["theory_loss"],
            "infinite_width_loss": best["infinite_width_loss"], "gap": gap, "combined_sd": combined,
            "gap_in_sd": gap / combined if combined > 0 else float("inf"),
            "interior_minimum": min(counts) < best["channels"] < max(counts)}
