"""Bayesian predictor statistics and theoretical similarity-matrix shifts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import LocalKernel, TestKernelVectors
from .linalg import PSDFactor, kernel_system
from .saddle import as_local_kernel, check_architecture


@dataclass(frozen=True)
class PredictorStats:
    """Posterior mean ``gamma``, variance ``sigma2`` and ``gen_error = (y0 - gamma)^2 + sigma2``.

    Fields are arrays with one entry per test point (0-d for a single point).
    """

    gamma: np.ndarray
    sigma2: np.ndarray
    gen_error: np.ndarray

    @property
    def bias2(self) -> np.ndarray:
        return self.gen_error - self.sigma2


def renormalize_test_vector(arch: str, tkv: TestKernelVectors, qbar, lambda1: float):
    """Apply the kernel renormalization to the test-kernel entries.

    Returns ``(kappa_R, kappa0_R)`` with shapes ``(T, P)`` and ``(T,)``.
    """
    arch = check_architecture(arch)
    n = tkv.kappa.shape[1]
    qbar = np.asarray(qbar, dtype=float)
    if arch == "fc" or qbar.ndim == 0:
        qbar = np.atleast_2d(qbar)
    if arch == "lcn":
        qbar = np.diag(np.diag(qbar) if qbar.ndim == 2 else qbar)
    if qbar.shape != (n, n):
        raise ValueError(f"Qbar has shape {qbar.shape}, test vectors have {n} patches")
    kappa_r = np.einsum("ij,tijm->tm", qbar, tkv.kappa) / (lambda1 * n)
    kappa0_r = np.einsum("ij,tij->t", qbar, tkv.kappa0) / (lambda1 * n)
    return kappa_r, kappa0_r


def predict(k_r: np.ndarray, kappa_r, kappa0_r, y, y0, beta: float, zero_temp_jitter: float = 1e-10,
            factor: PSDFactor | None = None) -> PredictorStats:
    """Posterior statistics of the network output at one or more test points.

    ``gamma = kappa_R^T (1/beta + K_R)^{-1} y`` and
    ``sigma2 = kappa0_R - kappa_R^T (1/beta + K_R)^{-1} kappa_R``. Negative
    ``sigma2`` values are reported as computed, not clamped.
    """
    fac = factor or kernel_system(k_r, beta, zero_temp_jitter)
    y = np.asarray(y, dtype=float)
    kappa_r = np.asarray(kappa_r, dtype=float)
    single = kappa_r.ndim == 1
    kr = np.atleast_2d(kappa_r)
    gamma = kr @ fac.solve(y)
    sigma2 = np.atleast_1d(np.asarray(kappa0_r, dtype=float)) - np.einsum("tm,mt->t", kr, fac.solve(kr.T))
    gen = (np.asarray(y0, dtype=float) - gamma) ** 2 + sigma2
    if single:
        gamma, sigma2, gen = gamma[0], sigma2[0], gen[0]
    return PredictorStats(gamma, sigma2, gen)


def fc_bias_zero_temp(k: np.ndarray, kappa, y, zero_temp_jitter: float = 1e-10) -> np.ndarray:
    """Zero-temperature FC posterior mean ``kappa^T K^{-1} y``, free of ``Qbar`` and ``lambda1``."""
    fac = PSDFactor(k, relative_jitter=zero_temp_jitter, name="FC kernel")
    return np.asarray(kappa, dtype=float) @ fac.solve(np.asarray(y, dtype=float))


def theory_delta_k_fc(k: np.ndarray, y, qbar: float, lambda1: float, n1: float) -> np.ndarray:
    """``Delta K = -[K - (lambda1 / Qbar) y y^T] / N1``."""
    y = np.asarray(y, dtype=float)
    qbar = float(np.squeeze(qbar))
    return -(np.asarray(k, dtype=float) - (lambda1 / qbar) * np.outer(y, y)) / n1


def theory_delta_k_cnn(lk: LocalKernel, qbar, k_r: np.ndarray, y, lambda1: float, n1: float,
                       zero_temp_jitter: float = 1e-10) -> np.ndarray:
    """Zero-temperature CNN similarity shift.

    ``Delta K = -1/(n lambda1 N1) sum_k sum_ij Qbar_ij K^{ki} A (K^{kj})^T`` with
    ``A = K_R^{-1} - (K_R^{-1} y)(K_R^{-1} y)^T``, ``n`` patches and
    ``N1 = N_c n``. The observed patch ``k`` carries the pattern index on both
    sides and the ``1/n`` matches the patch average in the similarity
    observable. A single patch reduces to the FC shift. The contraction is
    done pairwise so no six-index tensor is formed.
    """
    lk = as_local_kernel(lk)
    y = np.asarray(y, dtype=float)
    qbar = np.atleast_2d(np.asarray(qbar, dtype=float))
    fac = kernel_system(k_r, np.inf, zero_temp_jitter)
    yt = fac.solve(y)
    a = fac.inverse() - np.outer(yt, yt)
    v = lk.values                                                            # v[mu,k,nu,i] = K^{ki}_{mu nu}
    vq = np.einsum("akbi,ij->akbj", v, qbar, optimize=True)                 # sum_i K^{ki} Qbar_ij
    vqa = np.einsum("akbj,bc->akcj", vq, a, optimize=True)
    dk = -np.einsum("akcj,dkcj->ad", vqa, v, optimize=True) / (lk.n_patches * lambda1 * n1)
    return 0.5 * (dk + dk.T)
