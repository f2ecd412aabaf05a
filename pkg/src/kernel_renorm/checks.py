"""Acceptance checks shared by ``verify`` and the test suite.

Each ``criterion_*`` function runs one self-contained check and returns a list
of :class:`CheckResult`. Tolerances are module constants so that callers and
reports quote the same numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import ConvGeometry, Dataset, generate_linear_teacher
from .kernels import (LocalKernel, averaged_kernel, global_covariance, kernel_map, kernel_matrix,
                      local_covariance, local_kernel, test_kernel_vectors)
from .config import parse_config
from .experiments import FitError, fit_loglog, run_channel_sweep, simulate, sweep_shape
from .oracle import Network, TrainConfig, block_statistics, measure_similarity, sample_prior
from .predictor import (fc_bias_zero_temp, predict, renormalize_test_vector, theory_delta_k_cnn,
                        theory_delta_k_fc)
from .saddle import (cnn_action, fc_action, lcn_action, perturbative_qbar, renormalize, renormalize_cnn,
                     renormalize_fc, renormalize_lcn, solve_saddle)


@dataclass
class CheckResult:
    """Outcome of one acceptance check."""

    check: str
    module: str
    invariant: str
    observed: float
    threshold: str
    passed: bool
    detail: str = ""
    extra: dict = field(default_factory=dict, repr=False)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.check} {self.module}: {self.invariant} | observed {self.observed:.6g} "
                f"| required {self.threshold}" + (f" | {self.detail}" if self.detail else ""))

    def row(self) -> dict:
        return {"check": self.check, "module": self.module, "invariant": self.invariant,
                "observed": self.observed, "threshold": self.threshold, "passed": self.passed,
                "detail": self.detail}


def _timed(check: str, module: str, start: float, limit: float) -> CheckResult:
    elapsed = time.perf_counter() - start
    return CheckResult(check, module, "runtime (s)", elapsed, f"<= {limit:g}", elapsed <= limit)


def _random_local_instance(rng, p, n0, mask, activation="erf", lambda0=1.0):
    x = rng.standard_normal((p, n0))
    y = 0.5 * (1 + np.sign(x.sum(axis=1)))
    data = Dataset(x, y)
    geo = ConvGeometry(n0, mask, mask)
    return data, geo, local_kernel(local_covariance(data, geo, lambda0), activation)


# ---------------------------------------------------------------- 1 kernels

C1_LINEAR_TOL = 1e-12
C1_ERF_TOL = 1e-8
C1_SE_BOUND = 4.0
C1_RUNTIME = 60.0


# 40 nodes are not converged for erf once a diagonal exceeds ~2
C1_ERF_ORDER = 320
C1_ERF_MAX_DIAG = 10.0


def criterion_1(seed: int = 1, draws: int = 10_000) -> list:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    out = []
    data = generate_linear_teacher(12, 16, seed)
    cov = global_covariance(data, 1.3)
    lin = np.max(np.abs(kernel_matrix(cov, "linear") - cov))
    lcov = local_covariance(data, ConvGeometry(16, 4, 4), 1.3)
    lin = max(lin, np.max(np.abs(local_kernel(lcov, "linear").values - lcov.values)))
    out.append(CheckResult("1a", "kernel-engine", "linear kernel equals covariance (max abs)", lin,
                           f"<= {C1_LINEAR_TOL:g}", lin <= C1_LINEAR_TOL))

    c11, c22 = rng.uniform(0.05, C1_ERF_MAX_DIAG, (2, 100))
    c12 = rng.uniform(-1.0, 1.0, 100) * np.sqrt(c11 * c22)
    exact = kernel_map(c11, c22, c12, "erf")
    quad = kernel_map(c11, c22, c12, "erf", method="hermite", order=C1_ERF_ORDER)
    err = float(np.max(np.abs(exact - quad)))
    out.append(CheckResult("1b", "kernel-engine", "erf closed form vs Gauss-Hermite on 100 PSD blocks", err,
                           f"<= {C1_ERF_TOL:g}", err <= C1_ERF_TOL))

    # prior Monte Carlo of the similarity matrix for each architecture
    p, n0, lam0, lam1 = 5, 8, 1.0, 1.0
    x = Dataset(rng.standard_normal((p, n0)) * 1.2, np.zeros(p))
    geo = ConvGeometry(n0, 4, 4)
    for arch in ("fc", "lcn", "cnn"):
        net = Network(arch, n0, 3, None if arch == "fc" else geo, "tanh")
        if arch == "fc":
            k = kernel_matrix(global_covariance(x, lam0), "tanh")
        else:
            k = local_kernel(local_covariance(x, geo, lam0), "tanh").diagonal.mean(axis=0)
        snaps = list(sample_prior(net, lam0, lam1, draws, seed + 7))
        per = []
        for s in snaps:
            per.append(measure_similarity([s], x, k).delta_k)
        per = np.array(per)
        se = per.std(axis=0, ddof=1) / np.sqrt(draws)
        iu = np.triu_indices(p)
        z = float(np.max(np.abs(per.mean(axis=0)[iu]) / se[iu]))
        out.append(CheckResult(f"1c-{arch}", "gibbs-oracle", f"{arch} prior MC similarity vs analytic kernel (max |z|)",
                               z, f"<= {C1_SE_BOUND:g}", z <= C1_SE_BOUND, f"{draws} draws, {iu[0].size} entries"))
    out.append(_timed("1-runtime", "kernel-engine", start, C1_RUNTIME))
    return out


# ---------------------------------------------------------------- 2 infinite width

C2_QBAR_TOL = 1e-10
C2_AVG_TOL = 1e-12


def criterion_2(seed: int = 2) -> list:
    rng = np.random.default_rng(seed)
    data, geo, lk = _random_local_instance(rng, 16, 32, 8)
    sol = solve_saddle("cnn", lk, data.labels, 0.0, np.inf, 1.7)
    dev = float(np.max(np.abs(sol.qbar - np.eye(lk.n_patches))))
    avg = float(np.max(np.abs(renormalize_cnn(lk, np.eye(lk.n_patches), 1.7) - averaged_kernel(lk, 1.7))))
    return [CheckResult("2a", "saddle-solver", "alpha = 0 gives Qbar = 1 (max abs)", dev, f"<= {C2_QBAR_TOL:g}",
                        dev <= C2_QBAR_TOL),
            CheckResult("2b", "saddle-solver", "renormalized kernel at Qbar = 1 equals averaged kernel", avg,
                        f"<= {C2_AVG_TOL:g}", avg <= C2_AVG_TOL)]


# ---------------------------------------------------------------- 3 perturbative regime

C3_SLOPE = 2.0
C3_SLOPE_TOL = 0.3
C3_ALPHAS = np.geomspace(1e-3, 3e-2, 6)


def criterion_3(seed: int = 3, datasets: int = 5) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for d in range(datasets):
        data, geo, lk = _random_local_instance(rng, 32, 32, 8)
        errs = []
        for a in C3_ALPHAS:
            sol = solve_saddle("cnn", lk, data.labels, a, np.inf, 1.0, tol=1e-13, max_iter=100_000)
            pert = perturbative_qbar(lk, data.labels, a, 1.0)
            errs.append(np.max(np.abs(sol.qbar - pert)))
        slope = float(np.polyfit(np.log(C3_ALPHAS), np.log(errs), 1)[0])
        ok = abs(slope - C3_SLOPE) <= C3_SLOPE_TOL
        out.append(CheckResult(f"3-{d}", "saddle-solver", "log-log slope of |Qbar - (1 + alpha dQbar)|", slope,
                               f"{C3_SLOPE} +- {C3_SLOPE_TOL}", ok, f"dataset {d}, P=32, 4 patches"))
    return out


# ---------------------------------------------------------------- 4 architectural reductions

C4_TOL = 1e-8


def criterion_4(seed: int = 4) -> list:
    rng = np.random.default_rng(seed)
    p, n0, lam1, alpha = 24, 20, 1.3, 0.8
    x = rng.standard_normal((p + 5, n0))
    y = 0.5 * (1 + np.sign(x.sum(axis=1)))
    train, test = Dataset(x[:p], y[:p]), Dataset(x[p:], y[p:])
    single = ConvGeometry(n0, n0, n0)
    lk = local_kernel(local_covariance(train, single, 1.0), "tanh")
    k = kernel_matrix(global_covariance(train, 1.0), "tanh")
    diffs = {}
    diffs["kernel"] = np.max(np.abs(lk.block(0, 0) - k))
    diffs["action"] = abs(cnn_action(np.array([[0.3]]), np.array([[0.8]]), lk, train.labels, alpha, 50.0, lam1)
                          - fc_action(0.3, 0.8, k, train.labels, alpha, 50.0, lam1))
    s_cnn = solve_saddle("cnn", lk, train.labels, alpha, np.inf, lam1)
    s_fc = solve_saddle("fc", k, train.labels, alpha, np.inf, lam1)
    diffs["saddle"] = abs(s_cnn.qbar[0, 0] - s_fc.qbar[0, 0])
    kr_c = renormalize_cnn(lk, s_cnn.qbar, lam1)
    kr_f = renormalize_fc(k, s_fc.qbar[0, 0], lam1)
    diffs["renormalized kernel"] = np.max(np.abs(kr_c - kr_f))
    tk_c = test_kernel_vectors(train, test.inputs, single, "tanh")
    tk_f = test_kernel_vectors(train, test.inputs, None, "tanh")
    pc = predict(kr_c, *renormalize_test_vector("cnn", tk_c, s_cnn.qbar, lam1), train.labels, test.labels, np.inf)
    pf = predict(kr_f, *renormalize_test_vector("fc", tk_f, s_fc.qbar[0, 0], lam1), train.labels, test.labels,
                 np.inf)
    diffs["gamma"] = np.max(np.abs(pc.gamma - pf.gamma))
    diffs["sigma2"] = np.max(np.abs(pc.sigma2 - pf.sigma2))
    dk_c = theory_delta_k_cnn(lk, s_cnn.qbar, kr_c, train.labels, lam1, 64)
    dk_f = theory_delta_k_fc(k, train.labels, s_fc.qbar[0, 0], lam1, 64)
    diffs["delta K"] = np.max(np.abs(dk_c - dk_f))
    out = [CheckResult("4a", "saddle-solver", f"single-patch CNN equals FC: {name}", float(v), f"<= {C4_TOL:g}",
                       bool(v <= C4_TOL)) for name, v in diffs.items()]

    # LCN against the CNN with cross-patch blocks removed
    data, geo, lk = _random_local_instance(rng, 20, 24, 6, "tanh")
    cut = lk.without_cross_patch()
    qd, qbd = rng.uniform(-0.3, 0.5, lk.n_patches), rng.uniform(0.5, 1.5, lk.n_patches)
    d_act = abs(lcn_action(qd, qbd, lk, data.labels, alpha, 20.0, lam1)
                - cnn_action(np.diag(qd), np.diag(qbd), cut, data.labels, alpha, 20.0, lam1))
    s_l = solve_saddle("lcn", lk, data.labels, alpha, np.inf, lam1)
    s_c = solve_saddle("cnn", cut, data.labels, alpha, np.inf, lam1)
    d_sol = np.max(np.abs(s_l.qbar - s_c.qbar))
    d_kr = np.max(np.abs(renormalize_lcn(lk, np.diag(s_l.qbar), lam1) - renormalize_cnn(cut, s_c.qbar, lam1)))
    for name, v in (("action", d_act), ("saddle", d_sol), ("renormalized kernel", d_kr)):
        out.append(CheckResult("4b", "saddle-solver", f"LCN equals cross-patch-free CNN: {name}", float(v),
                               f"<= {C4_TOL:g}", bool(v <= C4_TOL)))
    return out


# ---------------------------------------------------------------- 5 brute-force saddle

C5_GRID = 200
C5_DIAG_RANGE = (0.01, 2.0)
C5_OFF_RANGE = (-1.0, 1.0)
C5_RUNTIME = 300.0


def _grid_reduced_action(q11, q22, q12, kb, y, alpha, beta, lambda1):
    """Reduced action on a grid of symmetric 2x2 ``Qbar`` for ``P = 2``, two patches, in closed form."""
    n = 2
    det_q = q11 * q22 - q12 ** 2
    kr = (q11 * kb[0, 0] + q22[..., None, None] * kb[1, 1]
          + q12[..., None, None] * (kb[0, 1] + kb[1, 0])) / (lambda1 * n)
    a = kr[..., 0, 0] + 1.0 / beta
    d = kr[..., 1, 1] + 1.0 / beta
    b = kr[..., 0, 1]
    det_k = a * d - b * b
    quad = (d * y[0] ** 2 - 2 * b * y[0] * y[1] + a * y[1] ** 2) / det_k
    ok = (det_q > 0) & (q11 > 0) & (det_k > 0) & (a > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = (q11 + q22 - np.log(det_q) - n
             + alpha / 2.0 * (np.log(det_k) + 2 * np.log(beta) + quad))
    return np.where(ok, s, np.inf)


def criterion_5(seed: int = 5) -> list:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    p, n0, lam1, alpha, beta = 2, 8, 1.0, 1.0, 10.0
    data, geo, lk = _random_local_instance(rng, p, n0, 4, "erf")
    sol = solve_saddle("cnn", lk, data.labels, alpha, beta, lam1, tol=1e-12)
    kb = lk.blocks  # (n, n, P, P)
    diag = np.linspace(*C5_DIAG_RANGE, C5_GRID)
    off = np.linspace(*C5_OFF_RANGE, C5_GRID)
    best = (np.inf, None)
    y = data.labels
    for i, q11 in enumerate(diag):
        q22, q12 = np.meshgrid(diag, off, indexing="ij")
        s = _grid_reduced_action(q11, q22, q12, kb, y, alpha, beta, lam1)
        k = np.unravel_index(np.argmin(s), s.shape)
        if s[k] < best[0]:
            best = (s[k], (q11, diag[k[0]], off[k[1]]))
    g11, g22, g12 = best[1]
    step = max(diag[1] - diag[0], off[1] - off[0])
    dev = float(max(abs(g11 - sol.qbar[0, 0]), abs(g22 - sol.qbar[1, 1]), abs(g12 - sol.qbar[0, 1])))
    return [CheckResult("5", "saddle-solver", "grid minimum of the reduced action vs solver (max entry)", dev,
                        f"<= {step:.3g} (grid spacing, 200^3 points)", dev <= max(step, 1e-2),
                        f"solver Qbar diag {sol.qbar[0, 0]:.4f},{sol.qbar[1, 1]:.4f} off {sol.qbar[0, 1]:.4f}"),
            _timed("5-runtime", "saddle-solver", start, C5_RUNTIME)]


# ---------------------------------------------------------------- 6 bias invariance

C6_FC_TOL = 1e-10
C6_CNN_MIN = 1e-3


def criterion_6(seed: int = 6, instances: int = 20) -> list:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        p, n0 = int(rng.integers(5, 30)), int(rng.integers(5, 40))
        x = rng.standard_normal((p + 3, n0))
        y = rng.standard_normal(p + 3)
        train, test = Dataset(x[:p], y[:p]), Dataset(x[p:], y[p:])
        k = kernel_matrix(global_covariance(train, 1.0), "tanh")
        tkv = test_kernel_vectors(train, test.inputs, None, "tanh")
        gammas = []
        for q in (0.1, 1.0, 10.0):
            kr, k0r = renormalize_test_vector("fc", tkv, q, 1.0)
            gammas.append(predict(renormalize_fc(k, q, 1.0), kr, k0r, train.labels, test.labels, np.inf).gamma)
        gammas = np.array(gammas)
        ref = fc_bias_zero_temp(k, tkv.kappa[:, 0, 0, :], train.labels)
        rel = np.max(np.abs(gammas - ref[None]) / np.maximum(np.abs(ref[None]), 1e-300))
        worst = max(worst, float(rel))
    out = [CheckResult("6a", "predictor", "FC zero-temperature Gamma relative change across Qbar in {0.1,1,10}",
                       worst, f"<= {C6_FC_TOL:g}", worst <= C6_FC_TOL, f"{instances} instances")]

    data, geo, lk = _random_local_instance(rng, 30, 32, 8, "tanh")
    x0 = rng.standard_normal((4, 32))
    tkv = test_kernel_vectors(data, x0, geo, "tanh")
    sol = solve_saddle("cnn", lk, data.labels, 2.0, np.inf, 1.0)
    gam = []
    for q in (np.eye(lk.n_patches), sol.qbar):
        kr, k0r = renormalize_test_vector("cnn", tkv, q, 1.0)
        gam.append(predict(renormalize_cnn(lk, q, 1.0), kr, k0r, data.labels, np.zeros(4), np.inf).gamma)
    rel = float(np.max(np.abs(gam[1] - gam[0]) / np.abs(gam[0])))
    out.append(CheckResult("6b", "predictor", "CNN Gamma relative change between Qbar = 1 and the saddle", rel,
                           f"> {C6_CNN_MIN:g}", rel > C6_CNN_MIN))
    return out


# ---------------------------------------------------------------- 7 similarity-shift identity

C7_TOL = 1e-9


def criterion_7(seed: int = 7, instances: int = 20) -> list:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        p, n0 = int(rng.integers(4, 30)), int(rng.integers(4, 40))
        x = rng.standard_normal((p, n0))
        y = rng.standard_normal(p)
        data = Dataset(x, y)
        k = kernel_matrix(global_covariance(data, 1.0), "erf")
        lk = LocalKernel.from_global(k, "erf")
        q, lam1, n1 = rng.uniform(0.2, 5.0), rng.uniform(0.5, 3.0), int(rng.integers(1, 200))
        kr = renormalize("cnn", lk, np.array([[q]]), lam1)
        d = np.max(np.abs(theory_delta_k_cnn(lk, np.array([[q]]), kr, y, lam1, n1)
                          - theory_delta_k_fc(k, y, q, lam1, n1)))
        worst = max(worst, float(d))
    return [CheckResult("7", "predictor", "single-patch CNN similarity shift equals FC formula (max abs)", worst,
                        f"<= {C7_TOL:g}", worst <= C7_TOL, f"{instances} instances")]


# ---------------------------------------------------------------- 8, 9 finite-size scaling of Delta K

@dataclass(frozen=True)
class DeskProtocol:
    """Langevin protocol shared by the scaling checks.

    Inputs are multiplied by ``sqrt(lambda0)`` so the input covariance is the
    same as at ``lambda0 = 1`` while the first-layer weights relax
    ``lambda0`` times faster.
    """

    n0: int = 256
    lambda0: float = 100.0
    lambda1: float = 1.0
    eta: float = 2e-3
    temperature: float = 2e-3
    steps: int = 200_000
    thin: int = 500
    chains: int = 8
    dtype: type = np.float32
    activation: str = "tanh"

    def dataset(self, p: int, seed: int) -> Dataset:
        d = generate_linear_teacher(p, self.n0, seed)
        return Dataset(d.inputs * np.sqrt(self.lambda0), d.labels, d.name)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.eta, self.temperature, self.steps, self.steps // 4, self.thin, "langevin", seed)


def scaling_runs(arch: str, sizes, geometry: ConvGeometry | None, protocol: DeskProtocol, seed: int) -> list:
    """One ``SimulationResult`` per size, with ``P`` equal to the width (``alpha = 1``)."""
    out = []
    for p in sizes:
        data = protocol.dataset(p, seed)
        geo = ConvGeometry.single_patch(protocol.n0) if geometry is None else geometry
        out.append(simulate(arch, data, geo, p, protocol.activation, protocol.lambda0, protocol.lambda1,
                            1.0 / protocol.temperature, protocol.train_config(seed + p), protocol.chains,
                            dtype=protocol.dtype))
    return out


def _slope(results, source: str):
    n1 = [r.n1 for r in results]
    var = [r.theory["01"].variance if source == "theory" else r.mc["01"]["variance"] for r in results]
    try:
        return fit_loglog(n1, var)
    except FitError:
        return None


def _slope_text(fit) -> str:
    return "no fit (non-positive variance)" if fit is None else f"{fit.slope:.3f} +- {fit.slope_se:.3f}"


C8_SIZES = (32, 64, 128)
C8_AGREE_SIZE = 64
C8_BANDS = 3.0
C8_SLOPE = (-2.8, -1.2)
C8_RUNTIME = 30 * 60


def criterion_8(seed: int = 8, protocol: DeskProtocol = DeskProtocol(), sizes=C8_SIZES) -> list:
    start = time.perf_counter()
    runs = scaling_runs("fc", sizes, None, protocol, seed)
    out = []
    ref = next(r for r in runs if r.P == C8_AGREE_SIZE) if C8_AGREE_SIZE in sizes else runs[len(runs) // 2]
    for block in ("00", "01", "11"):
        for which in ("mean", "variance"):
            th = ref.theory[block].mean if which == "mean" else ref.theory[block].variance
            mc = ref.mc[block]["mean" if which == "mean" else "variance"]
            z = abs(mc - th) / ref.band(block, which)
            out.append(CheckResult(f"8a-{block}-{which}", "gibbs-oracle",
                                   f"FC P = N1 = {ref.P} block {block} {which}: |MC - theory| / band", z,
                                   f"<= {C8_BANDS:g}", z <= C8_BANDS, f"MC {mc:.4g}, theory {th:.4g}"))
    big = max(runs, key=lambda r: r.P)
    ratio = big.mc["01"]["variance"] / ref.mc["01"]["variance"]
    out.append(CheckResult("8b", "gibbs-oracle", f"FC block-01 variance ratio P = {big.P} over P = {ref.P} (MC)",
                           ratio, "< 1 and positive", bool(0 < ratio < 1),
                           f"MC {ref.mc['01']['variance']:.3g} -> {big.mc['01']['variance']:.3g}"))
    fit, th_fit = _slope(runs, "mc"), _slope(runs, "theory")
    slope = float("nan") if fit is None else fit.slope
    out.append(CheckResult("8c", "cli-experiments", "FC block-01 variance log-log slope vs N1 (MC)", slope,
                           f"in [{C8_SLOPE[0]:g}, {C8_SLOPE[1]:g}]",
                           bool(C8_SLOPE[0] <= slope <= C8_SLOPE[1]),
                           f"MC {_slope_text(fit)}; theory {_slope_text(th_fit)}; sizes {list(sizes)}",
                           {"runs": runs}))
    out.append(_timed("8-runtime", "gibbs-oracle", start, C8_RUNTIME))
    return out


C9_SIZES = (16, 32, 64)
C9_SLOPE = (-0.6, 0.3)
C9_DISTINCT_SE = 3.0
C9_RUNTIME = 45 * 60


def criterion_9(seed: int = 9, protocol: DeskProtocol = DeskProtocol(), sizes=C9_SIZES) -> list:
    start = time.perf_counter()
    geo = ConvGeometry(protocol.n0, 16, 16)
    runs = scaling_runs("cnn", sizes, geo, protocol, seed)
    fit, th_fit = _slope(runs, "mc"), _slope(runs, "theory")
    slope = float("nan") if fit is None else fit.slope
    values = ", ".join(f"{r.width}: {r.mc['01']['variance']:.3g}" for r in runs)
    out = [CheckResult("9a", "cli-experiments", "CNN block-01 variance log-log slope vs N_c (MC)", slope,
                       f"in [{C9_SLOPE[0]:g}, {C9_SLOPE[1]:g}]", bool(C9_SLOPE[0] <= slope <= C9_SLOPE[1]),
                       f"MC {_slope_text(fit)} (N_c: var {values}); theory {_slope_text(th_fit)}",
                       {"runs": runs})]
    # FC reference at the same sizes from the theory, whose slope is -2 by construction
    fc_runs = [protocol.dataset(p, seed) for p in sizes]
    fc_var = []
    for p, data in zip(sizes, fc_runs):
        k = kernel_matrix(global_covariance(data, protocol.lambda0), protocol.activation)
        sol = solve_saddle("fc", k, data.labels, 1.0, 1.0 / protocol.temperature, protocol.lambda1)
        dk = theory_delta_k_fc(k, data.labels, float(np.squeeze(sol.qbar)), protocol.lambda1, p)
        fc_var.append(block_statistics(dk, data.labels)["01"].variance)
    fc_fit = fit_loglog(sizes, fc_var)
    if fit is None:
        gap, ok = float("nan"), False
    else:
        gap = (fit.slope - fc_fit.slope) / float(np.hypot(fit.slope_se, fc_fit.slope_se) or np.inf)
        ok = gap >= C9_DISTINCT_SE
    out.append(CheckResult("9b", "cli-experiments", "CNN slope above the FC slope, in fit standard errors", gap,
                           f">= {C9_DISTINCT_SE:g}", bool(ok),
                           f"CNN {_slope_text(fit)} vs FC {_slope_text(fc_fit)}"))
    out.append(_timed("9-runtime", "gibbs-oracle", start, C9_RUNTIME))
    return out


# ---------------------------------------------------------------- 10 channel sweep

C10_CONFIG = """\
[run]
seed = 5

[data]
source = template
P = 100
P_test = 2000
N0 = 144
informative = 1
amplitude = 2.5
offset = 1.0

[network]
architecture = cnn
activation = erf
M = 4
S = 4
dimensionality = 2
width = 8

[hyper]
lambda0 = 1.0
lambda1 = 100.0
beta = 500.0

[train]
eta = 2e-3
temperature = 2e-3
steps = 50000
burn_in = 12500
thin = 250
chains = 4
dtype = float32

[sweep]
channels = 2, 4, 8, 16, 32, 64, 128, 256, 1024
mc_channels = 2, 16, 128
"""
C10_GAP_SD = 2.0
C10_MC_POINTS = 3
C10_RUNTIME = 60 * 60


def criterion_10(config_text: str = C10_CONFIG) -> list:
    start = time.perf_counter()
    cfg = parse_config(config_text)
    rec, curves = run_channel_sweep(cfg)
    shape = sweep_shape(curves)
    fc = sorted(curves["fc"], key=lambda r: r["n1"])
    rise = float(max(np.diff([r["theory_loss"] for r in fc]).max(), 0.0))
    out = [CheckResult("10a", "cli-experiments", "FC theory test loss non-increasing in N1 (largest rise)", rise,
                       "== 0", shape["fc_non_increasing"],
                       f"{fc[0]['theory_loss']:.5g} at N1 = {fc[0]['n1']} -> {fc[-1]['theory_loss']:.5g} at "
                       f"N1 = {fc[-1]['n1']}, infinite width {fc[0]['infinite_width_loss']:.5g}")]
    out.append(CheckResult("10b", "cli-experiments", "CNN theory minimum below infinite width, in combined SD",
                           shape["gap_in_sd"], f">= {C10_GAP_SD:g}", bool(shape["gap_in_sd"] >= C10_GAP_SD),
                           f"minimum {shape['best_loss']:.5g} at N_c = {shape['best_channels']} vs "
                           f"{shape['infinite_width_loss']:.5g}; interior minimum: {shape['interior_minimum']}",
                           {"record": rec}))
    mc = [r for r in curves["cnn"] if r["n_mc_samples"] > 0 and np.isfinite(r["mc_loss"])]
    detail = "; ".join(f"N_c = {r['channels']}: MC {r['mc_loss']:.4g} +- {r['mc_se']:.2g} vs theory "
                       f"{r['theory_loss']:.4g}" for r in mc)
    out.append(CheckResult("10c", "gibbs-oracle", "Monte Carlo spot checks of the CNN test loss", len(mc),
                           f">= {C10_MC_POINTS}", len(mc) >= C10_MC_POINTS, detail))
    out.append(_timed("10-runtime", "cli-experiments", start, C10_RUNTIME))
    return out


# ---------------------------------------------------------------- driver

FAST = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7)
SLOW = (criterion_8, criterion_9, criterion_10)


def run_acceptance(include_slow: bool = False) -> list:
    """Run the acceptance checks; the Monte Carlo scaling and sweep checks only with ``include_slow``."""
    results = []
    for fn in FAST + (SLOW if include_slow else ()):
        results.extend(fn())
    return results
