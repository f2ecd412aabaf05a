"""Symmetric positive-definite solves with jitter escalation."""

from __future__ import annotations

import logging

import numpy as np
from scipy import linalg as sla

log = logging.getLogger(__name__)

#: relative jitter (times the mean diagonal) never exceeded during escalation
MAX_RELATIVE_JITTER = 1e-6


class SingularKernelError(np.linalg.LinAlgError):
    """Raised when a kernel system stays singular after maximal jitter."""


class PSDFactor:
    """Cholesky factor of ``A + jitter * I``.

    ``relative_jitter`` is multiplied by the mean diagonal of ``A``. When the
    factorization fails the jitter is raised tenfold (starting from ``1e-12``
    if it was zero) up to :data:`MAX_RELATIVE_JITTER`; every escalation is
    logged.
    """

    def __init__(self, a: np.ndarray, relative_jitter: float = 0.0, name: str = "kernel"):
        a = np.asarray(a, dtype=float)
        scale = float(np.mean(np.diag(a)))
        if not np.isfinite(scale) or scale <= 0:
            scale = 1.0
        rel = relative_jitter
        while True:
            try:
                self._cho = sla.cho_factor(a + rel * scale * np.eye(a.shape[0]), lower=True,
                                           check_finite=True)
                break
            except (np.linalg.LinAlgError, ValueError):
                nxt = 1e-12 if rel == 0 else rel * 10
                if nxt > MAX_RELATIVE_JITTER * (1 + 1e-9):
                    raise SingularKernelError(
                        f"{name}: not positive definite even with relative jitter {rel:.1e}; "
                        "the kernel is degenerate (duplicate patterns?)") from None
                log.info("%s: Cholesky failed, escalating relative jitter %.1e -> %.1e", name, rel, nxt)
                rel = nxt
        self.relative_jitter = rel
        self.jitter = rel * scale
        self.n = a.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self._cho, b, check_finite=False)

    def inverse(self) -> np.ndarray:
        inv = self.solve(np.eye(self.n))
        return 0.5 * (inv + inv.T)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._cho[0]))))


def kernel_system(k_r: np.ndarray, beta: float, zero_temp_jitter: float = 1e-10) -> PSDFactor:
    """Factor ``1/beta + K_R``; at ``beta = inf`` factor ``K_R`` with jitter."""
    k_r = np.asarray(k_r, dtype=float)
    if np.isinf(beta):
        return PSDFactor(k_r, relative_jitter=zero_temp_jitter, name="renormalized kernel")
    return PSDFactor(k_r + np.eye(k_r.shape[0]) / beta, name="1/beta + renormalized kernel")
