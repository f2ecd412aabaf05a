"""Effective actions, renormalized kernels and the saddle-point solver.

All three architectures share one representation. A fully-connected network
is a local kernel with a single patch, a locally-connected network keeps only
the diagonal of the order parameters. With ``n`` patches the renormalized
kernel is

    K_R = sum_ij Qbar_ij K^{ij} / (lambda1 n)

and the saddle point of

    S = -Tr Q Qbar + Tr log(1 + Q) + (alpha/P) [Tr log beta(1/beta + K_R) + y^T (1/beta + K_R)^{-1} y]

satisfies ``Qbar = (1 + Q)^{-1}`` together with

    Q_ij = alpha / (P lambda1 n) [Tr(A K^{ij}) - a^T K^{ij} a],   A = (1/beta + K_R)^{-1}, a = A y.

At ``beta = inf`` the divergent constant ``P log beta`` is dropped and ``K_R``
is factored with a small relative jitter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .kernels import LocalKernel, averaged_kernel
from .linalg import PSDFactor, SingularKernelError, kernel_system

log = logging.getLogger(__name__)

ARCHITECTURES = ("fc", "lcn", "cnn")


def as_local_kernel(kernel) -> LocalKernel:
    if isinstance(kernel, LocalKernel):
        return kernel
    return LocalKernel.from_global(kernel)


def check_architecture(arch: str) -> str:
    arch = arch.lower()
    if arch not in ARCHITECTURES:
        raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {arch!r}")
    return arch


# ---------------------------------------------------------------- renormalization

def renormalize_fc(k: np.ndarray, qbar: float, lambda1: float) -> np.ndarray:
    """``K_R = (Qbar / lambda1) K``."""
    return float(np.squeeze(qbar)) / lambda1 * np.asarray(k, dtype=float)


def renormalize_cnn(lk: LocalKernel, qbar: np.ndarray, lambda1: float) -> np.ndarray:
    """``K_R = sum_ij Qbar_ij K^{ij} / (lambda1 n)``."""
    qbar = np.atleast_2d(np.asarray(qbar, dtype=float))
    n = lk.n_patches
    if qbar.shape != (n, n):
        raise ValueError(f"Qbar has shape {qbar.shape}, kernel has {n} patches")
    k_r = np.einsum("ij,aibj->ab", qbar, lk.values) / (lambda1 * n)
    return 0.5 * (k_r + k_r.T)


def renormalize_lcn(lk: LocalKernel, qbar_diag: np.ndarray, lambda1: float) -> np.ndarray:
    """``K_R = sum_i Qbar_i K^{ii} / (lambda1 n)``."""
    qd = np.atleast_1d(np.asarray(qbar_diag, dtype=float))
    if qd.shape != (lk.n_patches,):
        raise ValueError(f"Qbar diagonal has shape {qd.shape}, kernel has {lk.n_patches} patches")
    return np.einsum("i,iab->ab", qd, lk.diagonal) / (lambda1 * lk.n_patches)


def renormalize(arch: str, kernel, qbar, lambda1: float) -> np.ndarray:
    arch = check_architecture(arch)
    lk = as_local_kernel(kernel)
    if arch == "lcn":
        qbar = np.asarray(qbar, dtype=float)
        return renormalize_lcn(lk, np.diag(qbar) if qbar.ndim == 2 else qbar, lambda1)
    return renormalize_cnn(lk, qbar, lambda1)


# ---------------------------------------------------------------- actions

def _data_term(k_r: np.ndarray, y: np.ndarray, alpha: float, beta: float, zero_temp_jitter: float) -> float:
    p = k_r.shape[0]
    fac = kernel_system(k_r, beta, zero_temp_jitter)
    logdet = fac.logdet() + (0.0 if np.isinf(beta) else p * np.log(beta))
    return alpha / p * (logdet + float(y @ fac.solve(y)))


def _order_term(q: np.ndarray, qbar: np.ndarray) -> float:
    q = np.atleast_2d(q)
    qbar = np.atleast_2d(qbar)
    sign, logdet = np.linalg.slogdet(np.eye(q.shape[0]) + q)
    if sign <= 0:
        raise ValueError("1 + Q is not positive definite")
    return -float(np.sum(q * qbar.T)) + logdet


def fc_action(q: float, qbar: float, k: np.ndarray, y, alpha: float, beta: float, lambda1: float,
              zero_temp_jitter: float = 1e-10) -> float:
    """Fully-connected action at scalar order parameters ``(Q, Qbar)``."""
    q, qbar = float(np.squeeze(q)), float(np.squeeze(qbar))
    if 1.0 + q <= 0:
        raise ValueError("1 + Q must be positive")
    y = np.asarray(y, dtype=float)
    return -q * qbar + np.log1p(q) + _data_term(renormalize_fc(k, qbar, lambda1), y, alpha, beta,
                                                 zero_temp_jitter)


def cnn_action(q: np.ndarray, qbar: np.ndarray, lk: LocalKernel, y, alpha: float, beta: float,
               lambda1: float, zero_temp_jitter: float = 1e-10) -> float:
    """Convolutional action at matrix order parameters ``(Q, Qbar)``."""
    lk = as_local_kernel(lk)
    y = np.asarray(y, dtype=float)
    return _order_term(q, qbar) + _data_term(renormalize_cnn(lk, qbar, lambda1), y, alpha, beta,
                                             zero_temp_jitter)


def lcn_action(q_diag, qbar_diag, lk: LocalKernel, y, alpha: float, beta: float, lambda1: float,
               zero_temp_jitter: float = 1e-10) -> float:
    """Locally-connected action at per-patch order parameters."""
    lk = as_local_kernel(lk)
    qd = np.atleast_1d(np.asarray(q_diag, dtype=float))
    qbd = np.atleast_1d(np.asarray(qbar_diag, dtype=float))
    if np.any(1.0 + qd <= 0):
        raise ValueError("1 + Q_i must be positive for every patch")
    y = np.asarray(y, dtype=float)
    order = -float(qd @ qbd) + float(np.sum(np.log1p(qd)))
    return order + _data_term(renormalize_lcn(lk, qbd, lambda1), y, alpha, beta, zero_temp_jitter)


def action(arch: str, q, qbar, kernel, y, alpha: float, beta: float, lambda1: float,
           zero_temp_jitter: float = 1e-10) -> float:
    arch = check_architecture(arch)
    if arch == "fc":
        return fc_action(q, qbar, as_local_kernel(kernel).block(0, 0), y, alpha, beta, lambda1, zero_temp_jitter)
    if arch == "lcn":
        q, qbar = (np.diag(m) if np.ndim(m) == 2 else m for m in (q, qbar))
        return lcn_action(q, qbar, kernel, y, alpha, beta, lambda1, zero_temp_jitter)
    return cnn_action(q, qbar, kernel, y, alpha, beta, lambda1, zero_temp_jitter)


def reduced_action(arch: str, qbar, kernel, y, alpha: float, beta: float, lambda1: float,
                   zero_temp_jitter: float = 1e-10) -> float:
    """Action with ``Q`` eliminated through ``Q = Qbar^{-1} - 1``.

    Stationary points in ``Qbar`` coincide with the saddle points of the full
    action; the saddle is a minimum of this function.
    """
    qbar = np.atleast_2d(np.asarray(qbar, dtype=float))
    if check_architecture(arch) == "lcn":
        qbar = np.diag(np.diag(qbar))
    q = np.linalg.inv(qbar) - np.eye(qbar.shape[0])
    return action(arch, q, qbar, kernel, y, alpha, beta, lambda1, zero_temp_jitter)


# ---------------------------------------------------------------- solver

@dataclass
class SaddleSolution:
    """Order parameters at the saddle point with convergence diagnostics."""

    architecture: str
    qbar: np.ndarray
    q: np.ndarray
    residual: float
    iterations: int
    converged: bool
    alpha: float
    beta: float
    lambda1: float
    min_eigenvalue: float
    lambda0: float | None = None
    geometry: str = ""
    jitter: float = 0.0
    residual_history: list = field(default_factory=list, repr=False)

    @property
    def n_patches(self) -> int:
        return self.qbar.shape[0]

    @property
    def positive_definite(self) -> bool:
        return self.min_eigenvalue > 0

    def qbar_for(self, arch: str | None = None):
        """``Qbar`` in the form the architecture's functions expect."""
        arch = arch or self.architecture
        if arch == "fc":
            return float(self.qbar[0, 0])
        if arch == "lcn":
            return np.diag(self.qbar).copy()
        return self.qbar

    def to_text(self) -> str:
        fields = {
            "architecture": self.architecture, "alpha": repr(float(self.alpha)),
            "beta": repr(float(self.beta)), "lambda0": repr(self.lambda0), "lambda1": repr(float(self.lambda1)),
            "geometry": self.geometry or "-", "residual": repr(float(self.residual)),
            "iterations": str(self.iterations), "converged": str(bool(self.converged)).lower(),
            "min_eigenvalue": repr(float(self.min_eigenvalue)), "jitter": repr(float(self.jitter)),
            "patches": str(self.n_patches),
        }
        lines = ["# saddle solution v1"] + [f"{k} = {v}" for k, v in fields.items()]
        for name, mat in (("qbar", self.qbar), ("q", self.q)):
            lines.append(f"[{name}]")
            lines.extend(" ".join(repr(float(x)) for x in row) for row in mat)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SaddleSolution":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "# saddle solution v1":
            raise ValueError("not a saddle solution record")
        meta, mats, current = {}, {}, None
        for ln in lines[1:]:
            if ln.startswith("[") and ln.endswith("]"):
                current = ln[1:-1]
                mats[current] = []
            elif current is None:
                key, _, val = ln.partition("=")
                meta[key.strip()] = val.strip()
            else:
                mats[current].append([float(x) for x in ln.split()])
        try:
            lambda0 = None if meta["lambda0"] == "None" else float(meta["lambda0"])
            return cls(architecture=meta["architecture"], qbar=np.array(mats["qbar"]), q=np.array(mats["q"]),
                       residual=float(meta["residual"]), iterations=int(meta["iterations"]),
                       converged=meta["converged"] == "true", alpha=float(meta["alpha"]),
                       beta=float(meta["beta"]), lambda1=float(meta["lambda1"]),
                       min_eigenvalue=float(meta["min_eigenvalue"]), lambda0=lambda0,
                       geometry="" if meta["geometry"] == "-" else meta["geometry"],
                       jitter=float(meta["jitter"]))
        except KeyError as exc:
            raise ValueError(f"saddle solution record lacks field {exc.args[0]!r}") from None


def saddle_q(arch: str, qbar: np.ndarray, lk: LocalKernel, y: np.ndarray, alpha: float, beta: float,
             lambda1: float, zero_temp_jitter: float = 1e-10) -> tuple[np.ndarray, PSDFactor]:
    """Right-hand side ``Q(Qbar)`` of the saddle equations."""
    n, p = lk.n_patches, lk.n_patterns
    fac = kernel_system(renormalize(arch, lk, qbar, lambda1), beta, zero_temp_jitter)
    a_inv = fac.inverse()
    a = fac.solve(y)
    trace = np.einsum("mn,minj->ij", a_inv, lk.values)
    quad = np.einsum("m,minj,n->ij", a, lk.values, a)
    q = alpha / (p * lambda1 * n) * (trace - quad)
    q = 0.5 * (q + q.T)
    if arch == "lcn":
        q = np.diag(np.diag(q))
    return q, fac


def _reduced_from_factor(qbar, fac, y, alpha, beta):
    """Reduced action ``Tr Qbar - log det Qbar - n + data term`` from an existing factorization."""
    p = y.size
    sign, logdet_qbar = np.linalg.slogdet(qbar)
    if sign <= 0:
        return np.inf
    logdet = fac.logdet() + (0.0 if np.isinf(beta) else p * np.log(beta))
    return float(np.trace(qbar)) - logdet_qbar - qbar.shape[0] + alpha / p * (logdet + float(y @ fac.solve(y)))


def _evaluate(arch, qbar, lk, y, alpha, beta, lambda1, zero_temp_jitter):
    """Everything the solver needs at one iterate, or ``None`` if the kernel cannot be factored."""
    try:
        q, fac = saddle_q(arch, qbar, lk, y, alpha, beta, lambda1, zero_temp_jitter)
    except SingularKernelError:
        return None
    eye = np.eye(qbar.shape[0])
    one_plus_q = eye + q
    target = None
    residual = np.inf
    if np.linalg.eigvalsh(one_plus_q)[0] > 0:
        target = np.linalg.inv(one_plus_q)
        target = 0.5 * (target + target.T)
        residual = float(np.max(np.abs(target - qbar)))
    return {"qbar": qbar, "q": q, "jitter": fac.jitter, "target": target, "residual": residual,
            "action": _reduced_from_factor(qbar, fac, y, alpha, beta),
            "grad": one_plus_q - np.linalg.inv(qbar)}


def _acceptable(cur, nxt, slack, strict: bool) -> bool:
    """Residual contraction when ``strict`` and the residual is finite, otherwise an action decrease."""
    if strict and np.isfinite(cur["residual"]):
        return nxt["residual"] <= 0.9 * cur["residual"]
    return nxt["action"] <= cur["action"] + slack


def solve_saddle(arch: str, kernel, y, alpha: float, beta: float, lambda1: float, tol: float = 1e-8,
                 max_iter: int = 10_000, damping: float = 0.5, zero_temp_jitter: float = 1e-10,
                 qbar0: np.ndarray | None = None, lambda0: float | None = None,
                 geometry: str = "") -> SaddleSolution:
    """Damped fixed-point iteration for the saddle point, started at ``Qbar = 1``.

    The basic step is ``Qbar -> (1 - theta) Qbar + theta (1 + Q(Qbar))^{-1}``.
    Its increment equals ``-theta (1 + Q)^{-1} G Qbar`` with
    ``G = 1 + Q - Qbar^{-1}`` the gradient of the reduced action, so it is a
    preconditioned descent direction. The step ``theta`` starts at ``damping``
    and is halved until the step keeps ``Qbar`` positive definite and shrinks
    the residual by at least ten percent. If no such step exists, the largest
    step that does not increase the reduced action is taken. After an accepted
    step ``theta`` grows back towards ``damping``. Where ``1 + Q`` is not positive definite the
    direction ``-Qbar G Qbar`` is used instead. On non-convergence the iterate
    with the smallest residual is returned with ``converged = False``.

    Raises
    ------
    SingularKernelError
        If the renormalized kernel at the starting point cannot be factored.
    """
    arch = check_architecture(arch)
    lk = as_local_kernel(kernel)
    if arch == "fc" and lk.n_patches != 1:
        raise ValueError("fully-connected solve needs a single-patch kernel")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    y = np.asarray(y, dtype=float)
    n = lk.n_patches
    qbar = np.eye(n) if qbar0 is None else np.atleast_2d(np.asarray(qbar0, dtype=float)).copy()
    if arch == "lcn":
        qbar = np.diag(np.diag(qbar))

    def project(m):
        m = 0.5 * (m + m.T)
        return np.diag(np.diag(m)) if arch == "lcn" else m

    cur = _evaluate(arch, qbar, lk, y, alpha, beta, lambda1, zero_temp_jitter)
    if cur is None:
        raise SingularKernelError("renormalized kernel is singular at the starting point")
    best = cur
    history = [cur["residual"]]
    theta = damping
    it = 0
    for it in range(1, max_iter + 1):
        if cur["residual"] <= tol:
            break
        qb = cur["qbar"]
        if cur["target"] is not None:
            direction = project(cur["target"] - qb)
        else:
            direction = project(-qb @ cur["grad"] @ qb)
        slack = 1e-12 * max(1.0, abs(cur["action"]))
        accepted = None
        for strict in (True, False):
            step = theta if strict else damping
            while step >= 1e-12:
                cand = project(qb + step * direction)
                if np.linalg.eigvalsh(cand)[0] > 0:
                    nxt = _evaluate(arch, cand, lk, y, alpha, beta, lambda1, zero_temp_jitter)
                    if nxt is not None and _acceptable(cur, nxt, slack, strict):
                        accepted = nxt
                        break
                step *= 0.5
            if accepted is not None:
                theta = step
                break
        if accepted is None:
            log.warning("%s saddle: no admissible step from the current iterate", arch)
            break
        cur = accepted
        theta = min(damping, 1.5 * theta)
        history.append(cur["residual"])
        if cur["residual"] < best["residual"]:
            best = cur
    converged = best["residual"] <= tol
    if not converged:
        log.warning("%s saddle not converged after %d iterations (best residual %.3e)", arch, it,
                    best["residual"])
    qbar = best["qbar"]
    min_eig = float(np.linalg.eigvalsh(qbar)[0])
    if min_eig <= 0:
        log.warning("Qbar at the saddle is not positive definite (min eigenvalue %.3e)", min_eig)
    return SaddleSolution(arch, qbar, best["q"], best["residual"], len(history) - 1, converged, alpha, beta,
                          lambda1, min_eig, lambda0, geometry, best["jitter"], history)


def perturbative_qbar(kernel, y, alpha: float, lambda1: float, beta: float = np.inf) -> np.ndarray:
    """First-order small-``alpha`` solution ``Qbar = 1 + alpha dQbar``.

    ``dQbar_ij = [yt^T K^{ij} yt - Tr(K^{ij} Kbar^{-1})] / (P lambda1 n)`` with
    ``yt = Kbar^{-1} y`` and ``Kbar`` the averaged kernel (plus ``1/beta``).
    """
    lk = as_local_kernel(kernel)
    y = np.asarray(y, dtype=float)
    n, p = lk.n_patches, lk.n_patterns
    kbar = averaged_kernel(lk, lambda1)
    fac = kernel_system(kbar, beta)
    kinv = fac.inverse()
    yt = fac.solve(y)
    delta = (np.einsum("m,minj,n->ij", yt, lk.values, yt) - np.einsum("mn,minj->ij", kinv, lk.values))
    delta /= p * lambda1 * n
    return np.eye(n) + alpha * 0.5 * (delta + delta.T)


__all__ = [
    "ARCHITECTURES", "SaddleSolution", "SingularKernelError", "action", "cnn_action", "fc_action",
    "lcn_action", "perturbative_qbar", "reduced_action", "renormalize", "renormalize_cnn", "renormalize_fc",
    "renormalize_lcn", "saddle_q", "solve_saddle",
]
