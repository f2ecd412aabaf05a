"""Covariances of the hidden pre-activations and the kernels built from them.

A kernel entry is the Gaussian expectation ``E[s(t1) s(t2)]`` with
``(t1, t2) ~ N(0, [[c11, c12], [c12, c22]])``. Linear and erf activations have
closed forms. For tanh the default route uses the exact scale-mixture

    tanh(x) = E_K[ erf(x / (sqrt(2) K)) ],   K ~ Kolmogorov,

which turns the kernel into an average of arcsine kernels over two independent
Kolmogorov scales. The average is taken with a Gauss rule for the Kolmogorov
law; 24 nodes reach machine precision for any variance. Tensor-product
Gauss-Hermite quadrature is available for every activation as an independent
check (``method="hermite"``).
"""

from __future__ import annotations

import functools
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .data import ConvGeometry, Dataset, patch_indices

ODD_ACTIVATIONS = ("linear", "erf", "tanh")
DEFAULT_HERMITE_ORDER = 40
DEFAULT_MIXTURE_ORDER = 24
CORRELATION_CLIP = 1.0 - 1e-12
PSD_TOLERANCE = 1e-8

_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


@dataclass(frozen=True)
class Activation:
    kind: str

    def __post_init__(self):
        if self.kind not in ODD_ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.kind!r}; odd activations only: {ODD_ACTIVATIONS}")

    def __call__(self, x, out=None):
        if self.kind == "linear":
            return np.multiply(x, 1.0, out=out)
        if self.kind == "erf":
            return special.erf(x, out=out)
        return np.tanh(x, out=out)

    def derivative(self, x):
        if self.kind == "linear":
            return np.ones_like(np.asarray(x, dtype=float))
        if self.kind == "erf":
            return _TWO_OVER_SQRT_PI * np.exp(-np.square(x))
        return 1.0 - np.square(np.tanh(x))

    def derivative_from_output(self, x, s):
        """Derivative reusing ``s = self(x)`` where that is cheaper."""
        if self.kind == "tanh":
            return 1.0 - s * s
        return self.derivative(x)


def get_activation(act) -> Activation:
    return act if isinstance(act, Activation) else Activation(str(act))


# ---------------------------------------------------------------- quadrature

def _kolmogorov_pdf(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    out = np.zeros_like(k)
    j = np.arange(1, 40)[:, None]
    big = k >= 1.0
    kb = k[big]
    out[big] = 8.0 * kb * np.sum((-1.0) ** (j + 1) * j ** 2 * np.exp(-2.0 * j ** 2 * kb ** 2), axis=0)
    small = (~big) & (k > 0)
    ks = k[small]
    a = (2 * j - 1) ** 2 * np.pi ** 2 / 8.0
    out[small] = np.sqrt(2 * np.pi) * np.sum(np.exp(-a / ks ** 2) * (2 * a / ks ** 4 - 1 / ks ** 2), axis=0)
    return out


@functools.lru_cache(maxsize=None)
def kolmogorov_rule(order: int = DEFAULT_MIXTURE_ORDER) -> tuple[np.ndarray, np.ndarray]:
    """Gauss nodes and weights for expectations under the Kolmogorov law.

    Recurrence coefficients come from a discretized Stieltjes procedure on a
    composite Gauss-Legendre grid over ``[0, 6.5]`` (the tail mass beyond is
    ~1e-36), nodes and weights from Golub-Welsch.
    """
    t, wt = np.polynomial.legendre.leggauss(20)
    edges = np.linspace(0.0, 6.5, 401)
    lo, hi = edges[:-1, None], edges[1:, None]
    k = ((hi - lo) / 2 * t + (hi + lo) / 2).ravel()
    w = ((hi - lo) / 2 * wt).ravel() * _kolmogorov_pdf(k)
    w /= w.sum()
    a = np.zeros(order)
    b = np.zeros(order)
    p_prev, p = np.zeros_like(k), np.ones_like(k)
    norm = 1.0
    for n in range(order):
        a[n] = np.sum(w * k * p * p) / norm
        p_prev, p = p, (k - a[n]) * p - (b[n] if n else 0.0) * p_prev
        norm_prev, norm = norm, np.sum(w * p * p)
        if n + 1 < order:
            b[n + 1] = norm / norm_prev
    off = np.sqrt(b[1:])
    nodes, vecs = np.linalg.eigh(np.diag(a) + np.diag(off, 1) + np.diag(off, -1))
    return nodes, vecs[0] ** 2


@functools.lru_cache(maxsize=None)
def hermite_rule(order: int = DEFAULT_HERMITE_ORDER) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights for ``E[f(z)]``, ``z ~ N(0, 1)``."""
    z, w = np.polynomial.hermite_e.hermegauss(order)
    return z, w / w.sum()


# ---------------------------------------------------------------- kernel map

def _erf_kernel(c11, c22, c12):
    return (2.0 / np.pi) * np.arcsin(2.0 * c12 / np.sqrt((1.0 + 2.0 * c11) * (1.0 + 2.0 * c22)))


def _tanh_mixture_kernel(c11, c22, c12, order):
    k, w = kolmogorov_rule(order)
    k2 = k * k
    a = np.sqrt(k2[None, :] + c11[:, None])
    b = np.sqrt(k2[None, :] + c22[:, None])
    ratio = c12[:, None, None] / (a[:, :, None] * b[:, None, :])
    return (2.0 / np.pi) * np.einsum("k,l,ekl->e", w, w, np.arcsin(ratio))


def _hermite_kernel(c11, c22, c12, act, order):
    z, w = hermite_rule(order)
    s1, s2 = np.sqrt(c11), np.sqrt(c22)
    rho = np.clip(c12 / (s1 * s2), -CORRELATION_CLIP, CORRELATION_CLIP)
    f1 = act(s1[:, None] * z[None, :])
    inner = (rho * s2)[:, None, None] * z[None, :, None] + (np.sqrt(1 - rho ** 2) * s2)[:, None, None] * z[None, None, :]
    f2 = act(inner)
    return np.einsum("k,l,ek,ekl->e", w, w, f1, f2)


def kernel_map(c11, c22, c12, activation="erf", method: str | None = None, order: int | None = None,
               threads: int = 1) -> np.ndarray:
    """Evaluate ``E[s(t1) s(t2)]`` elementwise over broadcast covariance entries.

    ``method`` is ``"exact"`` (linear, erf), ``"mixture"`` (tanh, default) or
    ``"hermite"`` (any activation, tensor-product Gauss-Hermite of ``order``
    nodes per axis). Blocks with a zero variance return 0, since ``s(0) = 0``
    for odd activations.
    """
    act = get_activation(activation)
    c11, c22, c12 = np.broadcast_arrays(*(np.asarray(c, dtype=float) for c in (c11, c22, c12)))
    shape = c11.shape
    c11, c22, c12 = c11.ravel(), c22.ravel(), c12.ravel()
    if np.any(c11 < 0) or np.any(c22 < 0):
        raise ValueError("negative variance in covariance block")
    bound = c11 * c22
    if np.any(c12 * c12 > bound * (1 + PSD_TOLERANCE) + 1e-300):
        worst = np.max(np.abs(c12) / np.sqrt(np.maximum(bound, 1e-300)))
        raise ValueError(f"covariance block not positive semidefinite (|correlation| = {worst:.6g})")
    if method is None:
        method = {"linear": "exact", "erf": "exact", "tanh": "mixture"}[act.kind]
    if method == "exact" and act.kind == "tanh":
        raise ValueError("tanh has no closed form; use method='mixture' or 'hermite'")
    if method == "mixture" and act.kind != "tanh":
        method = "exact"

    out = np.zeros(c11.shape)
    live = (c11 > 0) & (c22 > 0)
    if method == "exact":
        if act.kind == "linear":
            out[live] = c12[live]
        else:
            out[live] = _erf_kernel(c11[live], c22[live], c12[live])
        return out.reshape(shape)

    bound_sqrt = np.sqrt(bound[live])
    c12l = np.clip(c12[live], -bound_sqrt, bound_sqrt)
    idx = np.flatnonzero(live)
    if method == "mixture":
        order = order or DEFAULT_MIXTURE_ORDER
        fn = functools.partial(_tanh_mixture_kernel, order=order)
    elif method == "hermite":
        order = order or DEFAULT_HERMITE_ORDER
        fn = functools.partial(_hermite_kernel, act=act, order=order)
    else:
        raise ValueError(f"unknown method {method!r}")
    chunk = max(1, 2_000_000 // (order * order))
    starts = range(0, idx.size, chunk)

    def run(s):
        sl = slice(s, s + chunk)
        return s, fn(c11[live][sl], c22[live][sl], c12l[sl])

    vals = np.empty(idx.size)
    if threads > 1 and idx.size > chunk:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = map(run, starts)
    for s, v in results:
        vals[s:s + v.size] = v
    out[idx] = vals
    return out.reshape(shape)


def kernel_matrix(cov: np.ndarray, activation="erf", **kw) -> np.ndarray:
    """Apply :func:`kernel_map` to every 2x2 block of a symmetric covariance matrix."""
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    d = np.diag(cov)
    iu, ju = np.triu_indices(n)
    vals = kernel_map(d[iu], d[ju], cov[iu, ju], activation, **kw)
    out = np.empty((n, n))
    out[iu, ju] = vals
    out[ju, iu] = vals
    return out


# ---------------------------------------------------------------- covariances

def global_covariance(data, lambda0: float) -> np.ndarray:
    """``C[mu, nu] = x_mu . x_nu / (lambda0 N0)``."""
    x = data.inputs if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    c = x @ x.T / (lambda0 * x.shape[1])
    return 0.5 * (c + c.T)


@dataclass(frozen=True)
class LocalKernel:
    """Four-index tensor ``K^{ij}_{mu nu}`` stored as ``values[mu, i, nu, j]``.

    Reshaped to ``(P * n, P * n)`` this is the pattern-major multi-index matrix
    ``K_{(mu,i),(nu,j)}``. A local covariance is the same object with the
    linear activation.
    """

    values: np.ndarray
    activation: str = "linear"
    lambda0: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 4 or v.shape[0] != v.shape[2] or v.shape[1] != v.shape[3]:
            raise ValueError(f"local kernel must have shape (P, n, P, n), got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def n_patterns(self) -> int:
        return self.values.shape[0]

    @property
    def n_patches(self) -> int:
        return self.values.shape[1]

    def block(self, i: int, j: int) -> np.ndarray:
        """``K^{ij}`` as a ``P x P`` matrix."""
        return self.values[:, i, :, j]

    @property
    def blocks(self) -> np.ndarray:
        """All ``K^{ij}``, shape ``(n, n, P, P)``."""
        return self.values.transpose(1, 3, 0, 2)

    @property
    def diagonal(self) -> np.ndarray:
        """``K^{ii}`` stacked, shape ``(n, P, P)`` (the locally-connected view)."""
        return np.einsum("aibi->iab", self.values)

    def matrix(self) -> np.ndarray:
        p, n = self.values.shape[:2]
        return self.values.reshape(p * n, p * n)

    def without_cross_patch(self) -> "LocalKernel":
        """Copy with every ``K^{ij}``, ``i != j``, set to zero."""
        v = self.values * np.eye(self.n_patches)[None, :, None, :]
        return LocalKernel(v, self.activation, self.lambda0)

    @classmethod
    def from_global(cls, k: np.ndarray, activation="linear", lambda0=1.0) -> "LocalKernel":
        k = np.asarray(k, dtype=float)
        return cls(k[:, None, :, None], activation, lambda0)


def _patches(x: np.ndarray, geometry: ConvGeometry | None) -> np.ndarray:
    """``(P, n, M)`` view of the inputs through the patch index table."""
    if geometry is None:
        return x[:, None, :]
    if geometry.n0 != x.shape[1]:
        raise ValueError(f"geometry expects N0={geometry.n0}, data has {x.shape[1]}")
    return x[:, patch_indices(geometry)]


def local_covariance(data, geometry: ConvGeometry | None, lambda0: float) -> LocalKernel:
    """``C^{ij}_{mu nu} = sum_m x^mu_{S i + m} x^nu_{S j + m} / (lambda0 M)``.

    ``geometry=None`` is the fully-connected case: one patch covering the
    input, identical to :func:`global_covariance`.
    """
    x = data.inputs if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    xp = _patches(x, geometry)
    p, n, m = xp.shape
    flat = xp.reshape(p * n, m)
    c = flat @ flat.T / (lambda0 * m)
    c = 0.5 * (c + c.T)
    return LocalKernel(c.reshape(p, n, p, n), "linear", lambda0)


def local_kernel(cov: LocalKernel, activation="erf", **kw) -> LocalKernel:
    """Map every block ``(C^{ii}_{mu mu}, C^{ij}_{mu nu}, C^{jj}_{nu nu})`` through the activation."""
    act = get_activation(activation)
    k = kernel_matrix(cov.matrix(), act, **kw)
    return LocalKernel(k.reshape(cov.values.shape), act.kind, cov.lambda0)


def averaged_kernel(lk: LocalKernel, lambda1: float) -> np.ndarray:
    """Infinite-channel CNN kernel ``sum_i K^{ii} / (lambda1 n)``."""
    return lk.diagonal.sum(axis=0) / (lambda1 * lk.n_patches)


@dataclass(frozen=True)
class TestKernelVectors:
    """Kernel entries between training patterns and test points.

    ``kappa[t, i, j, mu]`` pairs patch ``i`` of training pattern ``mu`` with
    patch ``j`` of test point ``t``; ``kappa0[t, i, j]`` is the test self-term.
    The fully-connected case has ``n = 1``.
    """

    kappa: np.ndarray
    kappa0: np.ndarray

    @property
    def n_test(self) -> int:
        return self.kappa.shape[0]


def test_kernel_vectors(data, x0, geometry: ConvGeometry | None, activation="erf", lambda0: float = 1.0,
                        **kw) -> TestKernelVectors:
    x = data.inputs if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = x0[None, :]
    if x0.shape[1] != x.shape[1]:
        raise ValueError(f"test points have {x0.shape[1]} coordinates, training data {x.shape[1]}")
    xp = _patches(x, geometry)
    tp = _patches(x0, geometry)
    m = xp.shape[2]
    c_train = np.einsum("pim,pim->pi", xp, xp) / (lambda0 * m)          # C^{ii}_{mu mu}
    c_test = np.einsum("tim,tjm->tij", tp, tp) / (lambda0 * m)          # C^{ij}_{00}
    c_cross = np.einsum("pim,tjm->tijp", xp, tp) / (lambda0 * m)        # C^{ij}_{mu 0}
    diag_test = np.einsum("tii->ti", c_test)
    kappa = kernel_map(c_train.T[None, :, None, :], diag_test[:, None, :, None], c_cross, activation, **kw)
    kappa0 = kernel_map(diag_test[:, :, None], diag_test[:, None, :], c_test, activation, **kw)
    return TestKernelVectors(kappa, kappa0)


# ---------------------------------------------------------------- kernel files

_MAGIC = "# kernel-renorm kernel v1"
_HEADER_FIELDS = ("P", "patches", "activation", "lambda0", "dtype")


class KernelFileError(ValueError):
    pass


def save_kernel(path, kernel, activation: str | None = None, lambda0: float | None = None) -> None:
    """Write a global ``(P, P)`` matrix or a :class:`LocalKernel` with a text header."""
    if isinstance(kernel, LocalKernel):
        values = kernel.values
        activation = activation or kernel.activation
        lambda0 = kernel.lambda0 if lambda0 is None else lambda0
    else:
        k = np.asarray(kernel, dtype=float)
        values = k[:, None, :, None]
    if activation is None or lambda0 is None:
        raise ValueError("activation and lambda0 are required in the header")
    p, n = values.shape[:2]
    header = f"{_MAGIC}\nP={p} patches={n} activation={activation} lambda0={float(lambda0)!r} dtype=<f8\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_kernel(path) -> LocalKernel:
    """Read a kernel file; a malformed header raises :class:`KernelFileError` naming the field."""
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n", 2)
    if len(lines) < 3 or lines[0].decode("utf-8", "replace") != _MAGIC:
        raise KernelFileError(f"{path}: missing kernel file magic line")
    fields = dict(re.findall(r"(\w+)=(\S+)", lines[1].decode("utf-8", "replace")))
    for name in _HEADER_FIELDS:
        if name not in fields:
            raise KernelFileError(f"{path}: header field '{name}' missing")
    try:
        p, n = int(fields["P"]), int(fields["patches"])
        if p < 1 or n < 1:
            raise ValueError
    except ValueError:
        bad = "P" if not fields["P"].isdigit() or int(fields["P"]) < 1 else "patches"
        raise KernelFileError(f"{path}: header field '{bad}' is not a positive integer") from None
    try:
        lambda0 = float(fields["lambda0"])
    except ValueError:
        raise KernelFileError(f"{path}: header field 'lambda0' is not a number") from None
    if fields["activation"] not in ODD_ACTIVATIONS:
        raise KernelFileError(f"{path}: header field 'activation' has unknown value {fields['activation']!r}")
    if fields["dtype"] != "<f8":
        raise KernelFileError(f"{path}: header field 'dtype' must be <f8")
    body = lines[2]
    if len(body) != 8 * (p * n) ** 2:
        raise KernelFileError(f"{path}: payload has {len(body)} bytes, header field 'P'/'patches' "
                              f"implies {8 * (p * n) ** 2}")
    values = np.frombuffer(body, dtype="<f8").reshape(p, n, p, n).copy()
    return LocalKernel(values, fields["activation"], lambda0)
