"""Gibbs-posterior sampling of shallow FC, LCN and CNN networks.

Networks
--------
With input patches ``x_i`` (``n`` patches of ``M`` coordinates, ``n = 1`` and
``M = N0`` for FC) the pre-activations and output are

    h_i^a = W^a . x_i / sqrt(M)              (LCN: W_i^a, one mask per patch)
    f     = sum_{i,a} v_i^a s(h_i^a) / sqrt(N1),   N1 = N_c n.

Sampling
--------
Several chains are advanced together as a batch; each chain owns its random
stream, so a chain's trajectory does not depend on how many chains run beside
it. For weight-shared layers the sampler works in an orthonormal basis of the
span of the (training and registered extra) patch vectors. The component of
``W`` orthogonal to that span never reaches the loss: it follows an
independent prior Ornstein-Uhlenbeck process that starts at stationarity, so
it is drawn once from the prior and kept fixed. Every single-time observable
has exactly the distribution of the full simulation.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .data import ConvGeometry, Dataset, patch_indices
from .kernels import get_activation

log = logging.getLogger(__name__)

OPTIMIZERS = ("langevin", "gd", "adam")


class DivergenceError(RuntimeError):
    """Raised when the loss becomes non-finite; carries the last stable snapshots."""

    def __init__(self, message, last_stable=None):
        super().__init__(message)
        self.last_stable = last_stable


@dataclass(frozen=True)
class Network:
    """Architecture of a one-hidden-layer network.

    ``width`` is ``N1`` for FC and the channel count ``N_c`` otherwise.
    """

    kind: str
    n0: int
    width: int
    geometry: ConvGeometry | None = None
    activation: str = "tanh"
    biases: bool = False

    def __post_init__(self):
        if self.kind not in ("fc", "cnn", "lcn"):
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.width < 1 or self.n0 < 1:
            raise ValueError("width and n0 must be positive")
        if self.kind == "fc":
            if self.geometry is not None and self.geometry.patch_count != 1:
                raise ValueError("an FC network has no convolution geometry")
        elif self.geometry is None:
            raise ValueError(f"{self.kind} network needs a geometry")
        elif self.geometry.n0 != self.n0:
            raise ValueError("geometry n0 does not match the network input size")
        get_activation(self.activation)

    @property
    def n_patches(self) -> int:
        return 1 if self.kind == "fc" else self.geometry.patch_count

    @property
    def patch_size(self) -> int:
        return self.n0 if self.kind == "fc" else self.geometry.patch_size

    @property
    def n1(self) -> int:
        """Number of readout weights, ``N_c n`` (``N1`` for FC)."""
        return self.width * self.n_patches

    @property
    def shared(self) -> bool:
        return self.kind != "lcn"

    def patches(self, x: np.ndarray) -> np.ndarray:
        """``(n, P, M)`` patch tensor of inputs ``x`` of shape ``(P, N0)``."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n0:
            raise ValueError(f"inputs have {x.shape[1]} coordinates, network expects {self.n0}")
        if self.kind == "fc":
            return x[None, :, :]
        return x[:, patch_indices(self.geometry)].transpose(1, 0, 2)

    def weight_shape(self) -> tuple:
        if self.kind == "fc":
            return (self.width, self.n0)
        if self.kind == "cnn":
            return (self.width, self.patch_size)
        return (self.n_patches, self.width, self.patch_size)

    def readout_shape(self) -> tuple:
        return (self.width,) if self.kind == "fc" else (self.n_patches, self.width)

    def bias_shape(self) -> tuple:
        return (self.n_patches, self.width) if self.kind == "lcn" else (self.width,)

    def canonical(self, w, v, b=None):
        """Views with shapes ``(n_w, width, M)``, ``(n, width)``, ``(n_b, width)``."""
        w = np.asarray(w)
        v = np.asarray(v)
        w = w.reshape((-1, self.width, self.patch_size))
        v = v.reshape(self.n_patches, self.width)
        if b is not None:
            b = np.asarray(b).reshape(-1, self.width)
        return w, v, b


@dataclass
class ParameterSnapshot:
    network: Network
    w: np.ndarray
    v: np.ndarray
    b: np.ndarray | None = None
    step: int = 0
    chain: int = 0
    seed: int | None = None

    def __post_init__(self):
        net = self.network
        if self.w.shape != net.weight_shape():
            raise ValueError(f"W has shape {self.w.shape}, expected {net.weight_shape()}")
        if self.v.shape != net.readout_shape():
            raise ValueError(f"v has shape {self.v.shape}, expected {net.readout_shape()}")
        if self.b is not None and self.b.shape != net.bias_shape():
            raise ValueError(f"b has shape {self.b.shape}, expected {net.bias_shape()}")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.v))):
            raise ValueError("snapshot contains non-finite weights")


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 2e-3
    temperature: float = 2e-3
    steps: int = 200_000
    burn_in: int = 50_000
    thin: int = 1000
    optimizer: str = "langevin"
    seed: int = 0
    log_every: int = 100
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("learning rate must be positive")
        if not self.temperature >= 0:
            raise ValueError("temperature must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0 <= self.burn_in < self.steps:
            raise ValueError("need 0 <= burn_in < steps")
        if self.thin < 1 or self.log_every < 1:
            raise ValueError("thin and log_every must be positive")


# ---------------------------------------------------------------- single network evaluation

def hidden(network: Network, params: ParameterSnapshot | tuple, x) -> np.ndarray:
    """Pre-activations with shape ``(n, P, width)``."""
    w, v, b = _unpack(network, params)
    xp = network.patches(x)
    h = _hidden(network.shared, xp, w[None], None if b is None else b[None],
                1.0 / np.sqrt(network.patch_size))
    return h[0]


def forward(network: Network, params, x) -> np.ndarray:
    """Network outputs at the rows of ``x`` (a scalar for a single input vector)."""
    w, v, b = _unpack(network, params)
    act = get_activation(network.activation)
    s = act(hidden(network, (w, v, b), x))
    f = np.einsum("npa,na->p", s, v) / np.sqrt(network.n1)
    return f[0] if np.ndim(x) == 1 else f


def loss(network: Network, params, data: Dataset, lambda0: float, lambda1: float, temperature: float) -> float:
    """``1/2 sum (y - f)^2 + T lambda0 |W|^2 / 2 + T lambda1 |v|^2 / 2``."""
    w, v, _ = _unpack(network, params)
    r = data.labels - forward(network, params, data.inputs)
    return 0.5 * float(r @ r) + 0.5 * temperature * (lambda0 * float(np.sum(w * w)) + lambda1 * float(np.sum(v * v)))


def loss_and_grad(network: Network, params, data: Dataset, lambda0: float, lambda1: float, temperature: float):
    """Loss and gradients ``(dW, dv, db)`` in the snapshot's own shapes."""
    w, v, b = _unpack(network, params)
    eng = _Engine(network, network.patches(data.inputs), data.labels, 1.0 / np.sqrt(network.patch_size),
                  lambda0, lambda1, temperature, w.dtype)
    val, gw, gv, gb = eng.loss_and_grad(w[None], v[None], None if b is None else b[None])
    shapes = (network.weight_shape(), network.readout_shape(), network.bias_shape())
    grads = (gw[0].reshape(shapes[0]), gv[0].reshape(shapes[1]), None if gb is None else gb[0].reshape(shapes[2]))
    return float(val[0]), grads


def _unpack(network: Network, params):
    if isinstance(params, ParameterSnapshot):
        return network.canonical(params.w, params.v, params.b)
    return network.canonical(*params)


def _hidden(shared, xp, w, b, scale):
    """Batched pre-activations ``(C, n, P, width)`` from ``xp`` ``(n, P, M)`` and ``w`` ``(C, n_w, width, M)``."""
    c, _, width, m = w.shape
    n, p, _ = xp.shape
    if shared:
        h = np.matmul(xp.reshape(n * p, m)[None], w[:, 0].transpose(0, 2, 1)).reshape(c, n, p, width)
    else:
        h = np.matmul(xp[None], w.transpose(0, 1, 3, 2))
    h *= scale
    if b is not None:
        h += b[:, :, None, :]
    return h


class _Engine:
    """Loss and gradients of a batch of ``C`` networks on fixed patch data.

    Work arrays are allocated once per batch size and reused, which matters
    because a sampling run is dominated by elementwise passes over
    ``(C, n, P, width)`` arrays.
    """

    def __init__(self, network, xp, y, scale, lambda0, lambda1, temperature, dtype=np.float64):
        self.net = network
        self.act = get_activation(network.activation)
        self.dtype = np.dtype(dtype)
        self.xs = np.ascontiguousarray(np.asarray(xp) * scale, dtype=dtype)       # scaled patches (n, P, M)
        self.y = np.asarray(y, dtype=dtype)
        self.lambda0, self.lambda1, self.temperature = lambda0, lambda1, temperature
        self.readout = 1.0 / np.sqrt(network.n1)
        self._bufs = None

    def _buffers(self, c, width):
        if self._bufs is None or self._bufs[0].shape[0] != c:
            n, p, m = self.xs.shape
            nw = 1 if self.net.shared else n
            self._bufs = (np.empty((c, n, p, width), self.dtype), np.empty((c, n, p, width), self.dtype),
                          np.empty((c, n, p, width), self.dtype), np.empty((c, nw, width, m), self.dtype))
        return self._bufs

    def data_grad(self, w, v, b):
        """Data loss ``(C,)`` and data-term gradients; the gradient arrays are reused buffers."""
        c, _, width, m = w.shape
        n, p, _ = self.xs.shape
        h, s, g, gw = self._buffers(c, width)
        if self.net.shared:
            np.matmul(self.xs.reshape(n * p, m)[None], w[:, 0].transpose(0, 2, 1), out=h.reshape(c, n * p, width))
        else:
            np.matmul(self.xs[None], w.transpose(0, 1, 3, 2), out=h)
        if b is not None:
            h += b[:, :, None, :]
        self.act(h, out=s)
        f = np.matmul(s, v[:, :, :, None])[..., 0].sum(axis=1)
        f *= self.readout
        r = self.y[None, :] - f
        val = 0.5 * np.einsum("cp,cp->c", r, r)
        rs = r * (-self.readout)                                            # dL/df
        gv = np.matmul(s.transpose(0, 1, 3, 2), rs[:, None, :, None])[..., 0]
        if self.act.kind == "tanh":
            np.multiply(s, s, out=g)
            np.subtract(1.0, g, out=g)
        else:
            g[...] = self.act.derivative_from_output(h, s)
        g *= v[:, :, None, :]
        g *= rs[:, None, :, None]                                           # dL/dh
        if self.net.shared:
            np.matmul(g.reshape(c, n * p, width).transpose(0, 2, 1), self.xs.reshape(n * p, m), out=gw[:, 0])
        else:
            np.matmul(g.transpose(0, 1, 3, 2), self.xs[None], out=gw)
        gb = None
        if b is not None:
            gb = g.sum(axis=(1, 2))[:, None, :] if self.net.shared else g.sum(axis=2)
        return val, gw, gv, gb

    def prior_energy(self, w, v):
        return 0.5 * self.temperature * (self.lambda0 * np.einsum("cnam,cnam->c", w, w)
                                         + self.lambda1 * np.einsum("cna,cna->c", v, v))

    def loss_and_grad(self, w, v, b):
        """Full loss and gradients (fresh arrays)."""
        val, gw, gv, gb = self.data_grad(w, v, b)
        t = self.temperature
        val = val + self.prior_energy(w, v)
        return val, gw + t * self.lambda0 * w, gv + t * self.lambda1 * v, None if gb is None else gb.copy()


# ---------------------------------------------------------------- update rules

def langevin_step(params: list, grads: list, eta: float, temperature: float, rng) -> list:
    """One Euler-Maruyama step ``theta - eta grad + sqrt(2 T eta) eps`` per array."""
    amp = np.sqrt(2.0 * temperature * eta)
    out = []
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient in Langevin step")
        new = p - eta * g
        if amp > 0:
            new = new + amp * rng.standard_normal(p.shape, dtype=p.dtype)
        out.append(new)
    return out


@dataclass
class AdamState:
    m: list
    s: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list, grads: list, state: AdamState, eta: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> list:
    """Standard bias-corrected Adam update; ``state`` is advanced in place."""
    state.t += 1
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient in Adam step")
        state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        state.s[k] = beta2 * state.s[k] + (1 - beta2) * g * g
        mhat = state.m[k] / (1 - beta1 ** state.t)
        shat = state.s[k] / (1 - beta2 ** state.t)
        out.append(p - eta * mhat / (np.sqrt(shat) + eps))
    return out


# ---------------------------------------------------------------- posterior sampling

@dataclass
class ChainLog:
    chain: int
    seed_entropy: int
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def plateau(self, burn_in: int) -> dict:
        """Running-mean diagnostic: loss mean over the last 20% of burn-in vs after burn-in."""
        st = np.asarray(self.steps)
        ls = np.asarray(self.losses)
        late = ls[(st >= 0.8 * burn_in) & (st < burn_in)]
        after = ls[st >= burn_in]
        a = float(np.mean(late)) if late.size else float("nan")
        b = float(np.mean(after)) if after.size else float("nan")
        return {"late_burn_in_mean": a, "sampling_mean": b,
                "relative_drift": abs(a - b) / max(abs(b), 1e-300) if late.size and after.size else float("nan")}


def init_params(network: Network, lambda0: float, lambda1: float, rng, dtype=np.float64):
    """Prior draw ``W ~ N(0, 1/lambda0)``, ``v ~ N(0, 1/lambda1)``; biases start at zero."""
    w = rng.standard_normal(network.weight_shape()) / np.sqrt(lambda0)
    v = rng.standard_normal(network.readout_shape()) / np.sqrt(lambda1)
    b = np.zeros(network.bias_shape()) if network.biases else None
    return w.astype(dtype), v.astype(dtype), None if b is None else b.astype(dtype)


def sample_prior(network: Network, lambda0: float, lambda1: float, n_draws: int, seed: int) -> Iterator[ParameterSnapshot]:
    """Independent exact draws from the Gaussian prior (the ``beta = 0`` ensemble)."""
    rng = np.random.default_rng(seed)
    for k in range(n_draws):
        w, v, b = init_params(network, lambda0, lambda1, rng)
        yield ParameterSnapshot(network, w, v, b, step=0, chain=k, seed=seed)


def _span_basis(vectors: np.ndarray, tol: float = 1e-10) -> np.ndarray | None:
    """Orthonormal basis (columns) of the row span, or ``None`` when it is the full space."""
    _, sv, vt = np.linalg.svd(vectors, full_matrices=False)
    rank = int(np.sum(sv > tol * max(sv[0], 1e-300))) if sv.size else 0
    if rank >= vectors.shape[1]:
        return None
    return vt[:rank].T


class PosteriorSampler:
    """Iterable over snapshots of ``chains`` independent runs.

    Snapshots are emitted at step 0 when ``include_initial`` is set, then
    every ``thin`` steps after ``burn_in``, all chains at the same step in
    chain order. ``logs`` holds one :class:`ChainLog` per chain.
    """

    def __init__(self, network: Network, data: Dataset, lambda0: float, lambda1: float, tc: TrainConfig,
                 chains: int = 1, include_initial: bool = False, extra_inputs=None, reduce: bool = True,
                 dtype=np.float64):
        self.network, self.data, self.tc = network, data, tc
        self.lambda0, self.lambda1 = lambda0, lambda1
        self.chains, self.include_initial, self.dtype = chains, include_initial, dtype
        self.logs = [ChainLog(c, 0) for c in range(chains)]
        xp = network.patches(data.inputs)
        self.basis = None
        # Adam is not rotation invariant, so the span reduction is exact only for gradient/Langevin updates
        if reduce and network.shared and tc.optimizer != "adam":
            vecs = xp.reshape(-1, network.patch_size)
            if extra_inputs is not None:
                vecs = np.vstack([vecs, network.patches(extra_inputs).reshape(-1, network.patch_size)])
            self.basis = _span_basis(vecs)
        xp_eff = xp if self.basis is None else xp @ self.basis
        self.engine = _Engine(network, xp_eff, data.labels, 1.0 / np.sqrt(network.patch_size),
                              lambda0, lambda1, tc.temperature, dtype)
        self.last_stable = None
        self.perp_decay = 1.0

    def _snapshot(self, c, step, w_eff, v, b, w_perp):
        net = self.network
        w = w_eff.astype(float)
        if self.basis is not None:
            stationary = self.tc.optimizer == "langevin" and self.tc.temperature > 0
            w = w @ self.basis.T + w_perp * (1.0 if stationary else self.perp_decay)
        return ParameterSnapshot(net, w.reshape(net.weight_shape()), v.astype(float).reshape(net.readout_shape()),
                                 None if b is None else b.astype(float).reshape(net.bias_shape()),
                                 step=step, chain=c, seed=self.tc.seed)

    def __iter__(self) -> Iterator[ParameterSnapshot]:
        net, tc, eng = self.network, self.tc, self.engine
        seqs = np.random.SeedSequence(tc.seed).spawn(self.chains)
        rngs = [np.random.default_rng(s) for s in seqs]
        ws, vs, bs, perps = [], [], [], []
        for c, rng in enumerate(rngs):
            self.logs[c] = ChainLog(c, int(seqs[c].entropy if seqs[c].entropy is not None else 0))
            w, v, b = init_params(net, self.lambda0, self.lambda1, rng)
            w, v, b = net.canonical(w, v, b)
            if self.basis is not None:
                perps.append(w - (w @ self.basis) @ self.basis.T)
                w = w @ self.basis
            ws.append(w)
            vs.append(v)
            bs.append(b)
        w = np.stack(ws).astype(self.dtype)
        v = np.stack(vs).astype(self.dtype)
        b = None if bs[0] is None else np.stack(bs).astype(self.dtype)
        perps = perps or [None] * self.chains
        adam = [AdamState.zeros_like([w[c], v[c]] + ([] if b is None else [b[c]])) for c in range(self.chains)]
        amp = np.sqrt(2.0 * tc.temperature * tc.eta)
        decay_w = 1.0 - tc.eta * tc.temperature * self.lambda0
        decay_v = 1.0 - tc.eta * tc.temperature * self.lambda1
        noise_w = np.empty(w.shape[1:], self.dtype)
        noise_v = np.empty(v.shape[1:], self.dtype)
        self.perp_decay = 1.0

        def emit(step):
            snaps = [self._snapshot(c, step, w[c], v[c], None if b is None else b[c], perps[c])
                     for c in range(self.chains)]
            self.last_stable = snaps
            return snaps

        if self.include_initial:
            yield from emit(0)
        for step in range(1, tc.steps + 1):
            logging_step = (step - 1) % tc.log_every == 0
            if tc.optimizer == "adam":
                val, gw, gv, gb = eng.loss_and_grad(w, v, b)
            else:
                val, gw, gv, gb = eng.data_grad(w, v, b)
                if logging_step:
                    val = val + eng.prior_energy(w, v)
            if not np.all(np.isfinite(val)):
                bad = int(np.flatnonzero(~np.isfinite(val))[0])
                raise DivergenceError(f"loss diverged at step {step} (chain {bad})", self.last_stable)
            if logging_step:
                for c in range(self.chains):
                    self.logs[c].steps.append(step - 1)
                    self.logs[c].losses.append(float(val[c]))
            if tc.optimizer == "adam":
                beta1, beta2 = tc.adam_betas
                for c in range(self.chains):
                    params = [w[c], v[c]] + ([] if b is None else [b[c]])
                    grads = [gw[c], gv[c]] + ([] if b is None else [gb[c]])
                    new = adam_step(params, grads, adam[c], tc.eta, beta1, beta2, tc.adam_eps)
                    w[c], v[c] = new[0], new[1]
                    if b is not None:
                        b[c] = new[2]
            else:
                # gradient step with the prior term folded into a decay factor
                w *= decay_w
                gw *= tc.eta
                w -= gw
                v *= decay_v
                v -= tc.eta * gv
                if b is not None:
                    b -= tc.eta * gb
                self.perp_decay *= decay_w
                if tc.optimizer == "langevin" and amp > 0:
                    for c, rng in enumerate(rngs):
                        rng.standard_normal(out=noise_w, dtype=self.dtype)
                        noise_w *= amp
                        w[c] += noise_w
                        rng.standard_normal(out=noise_v, dtype=self.dtype)
                        noise_v *= amp
                        v[c] += noise_v
                        if b is not None:
                            b[c] += amp * rng.standard_normal(b.shape[1:], dtype=self.dtype)
            if step > tc.burn_in and (step - tc.burn_in) % tc.thin == 0:
                yield from emit(step)
        val = eng.data_grad(w, v, b)[0] + eng.prior_energy(w, v)
        for c in range(self.chains):
            self.logs[c].steps.append(tc.steps)
            self.logs[c].losses.append(float(val[c]))


def sample_posterior(network: Network, data: Dataset, lambda0: float, lambda1: float, tc: TrainConfig,
                     chains: int = 1, **kw) -> PosteriorSampler:
    """Langevin (or optimizer) trajectories; iterate the result for snapshots."""
    if tc.optimizer == "langevin":
        log.info("Langevin sampling: T=%g eta=%g steps=%d chains=%d", tc.temperature, tc.eta, tc.steps, chains)
    return PosteriorSampler(network, data, lambda0, lambda1, tc, chains, **kw)


# ---------------------------------------------------------------- observables

def similarity(network: Network, params, x) -> np.ndarray:
    """``O_{mu nu} = sum_{i,a} s(h_i^{a mu}) s(h_i^{a nu}) / N1`` for one snapshot."""
    s = get_activation(network.activation)(hidden(network, params, x))
    o = np.einsum("npa,nqa->pq", s, s) / network.n1
    return 0.5 * (o + o.T)


@dataclass
class SimilarityEstimate:
    """Chain-averaged ``<O>`` and ``Delta K`` with per-chain estimates for error bars."""

    mean_o: np.ndarray
    delta_k: np.ndarray
    per_chain: np.ndarray
    n_snapshots: int
    baseline: str

    @property
    def n_chains(self) -> int:
        return self.per_chain.shape[0]

    @property
    def standard_error(self) -> np.ndarray:
        c = self.n_chains
        if c < 2:
            return np.full_like(self.delta_k, np.nan)
        return self.per_chain.std(axis=0, ddof=1) / np.sqrt(c)


def measure_similarity(snapshots, data, analytic_kernel: np.ndarray | None = None,
                       baseline: str = "analytic") -> SimilarityEstimate:
    """Average ``O`` over snapshots and subtract the initialization baseline.

    ``baseline="analytic"`` subtracts ``analytic_kernel`` (the prior mean of
    ``O``). ``baseline="initial"`` subtracts each chain's own ``O`` at step 0,
    a paired estimator whose initialization noise cancels; the stream must then
    contain step-0 snapshots.
    """
    x = data.inputs if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    sums, counts, init = {}, {}, {}
    for snap in snapshots:
        o = similarity(snap.network, snap, x)
        if snap.step == 0 and baseline == "initial":
            init[snap.chain] = o
            continue
        sums[snap.chain] = sums.get(snap.chain, 0.0) + o
        counts[snap.chain] = counts.get(snap.chain, 0) + 1
    if not sums:
        raise ValueError("no snapshots to average")
    chains = sorted(sums)
    means = np.stack([sums[c] / counts[c] for c in chains])
    if baseline == "analytic":
        if analytic_kernel is None:
            raise ValueError("analytic baseline needs the analytic kernel")
        per_chain = means - np.asarray(analytic_kernel)[None]
    elif baseline == "initial":
        missing = [c for c in chains if c not in init]
        if missing:
            raise ValueError(f"chains {missing} have no step-0 snapshot for the paired baseline")
        per_chain = means - np.stack([init[c] for c in chains])
    else:
        raise ValueError("baseline must be 'analytic' or 'initial'")
    return SimilarityEstimate(means.mean(axis=0), per_chain.mean(axis=0), per_chain,
                              int(sum(counts.values())), baseline)


@dataclass(frozen=True)
class BlockStat:
    block: str
    present: bool
    count: int = 0
    mean: float = float("nan")
    variance: float = float("nan")


def block_statistics(dk: np.ndarray, labels) -> dict:
    """Mean and variance of off-diagonal entries in blocks ``00``, ``01``, ``11``.

    Block ``01`` collects pairs with ``y_mu = 0`` and ``y_nu = 1``.
    """
    dk = np.asarray(dk, dtype=float)
    y = np.asarray(labels)
    out = {}
    for name, (a, bb) in {"00": (0, 0), "01": (0, 1), "11": (1, 1)}.items():
        rows = np.flatnonzero(y == a)
        cols = np.flatnonzero(y == bb)
        sub = dk[np.ix_(rows, cols)]
        if a == bb:
            sub = sub[~np.eye(rows.size, dtype=bool)]
        sub = sub.ravel()
        if sub.size == 0:
            out[name] = BlockStat(name, False)
        else:
            out[name] = BlockStat(name, True, int(sub.size), float(sub.mean()), float(sub.var()))
    return out


def block_statistics_with_errors(estimate: SimilarityEstimate, labels) -> dict:
    """Block mean/variance of the chain-averaged ``Delta K`` with chain-level error bars.

    The variance of the averaged matrix is inflated by sampling noise; the
    noise contribution (mean squared standard error over the block) is
    subtracted. Standard errors come from a jackknife over chains.
    """
    per = estimate.per_chain
    c = per.shape[0]

    def stats(mats):
        avg = mats.mean(axis=0)
        res = {}
        noise = None
        if mats.shape[0] > 1:
            noise = mats.var(axis=0, ddof=1) / mats.shape[0]
        for name, st in block_statistics(avg, labels).items():
            if not st.present:
                res[name] = (np.nan, np.nan)
                continue
            var = st.variance
            if noise is not None:
                var -= block_statistics(noise, labels)[name].mean
            res[name] = (st.mean, var)
        return res

    full = stats(per)
    out = {}
    for name, (mean, var) in full.items():
        if c > 2 and np.isfinite(mean):
            jk = np.array([stats(np.delete(per, k, axis=0))[name] for k in range(c)])
            se = np.sqrt((c - 1) / c * np.sum((jk - jk.mean(axis=0)) ** 2, axis=0))
        else:
            se = np.array([np.nan, np.nan])
        out[name] = {"mean": mean, "mean_se": float(se[0]), "variance": var, "variance_se": float(se[1])}
    return out


def test_loss_samples(snapshots, data: Dataset) -> np.ndarray:
    """Mean squared test error ``mean_t (y_t - f(x_t))^2`` for each snapshot."""
    return np.array([np.mean((data.labels - forward(s.network, s, data.inputs)) ** 2) for s in snapshots])


# ---------------------------------------------------------------- Monte-Carlo errors

def integrated_autocorr_time(x, c: float = 5.0) -> float:
    """Integrated autocorrelation time with the self-consistent window ``M >= c tau``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        return 1.0
    d = x - x.mean()
    var = d @ d / n
    if var == 0:
        return 1.0
    f = np.fft.rfft(d, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    tau = 1.0
    for m in range(1, n):
        tau = 1.0 + 2.0 * np.sum(acf[1:m + 1])
        if m >= c * tau:
            break
    return max(float(tau), 1.0)


def mc_standard_error(x) -> float:
    """Standard error of the mean of a correlated series."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float("nan")
    return float(np.sqrt(x.var(ddof=1) * integrated_autocorr_time(x) / x.size))


# ---------------------------------------------------------------- snapshot files

_SNAP_MAGIC = b"KRSNAP1\n"


def save_snapshots(path, snapshots) -> int:
    """Append-free binary dump: magic, then per snapshot a text header line and float64 payloads."""
    count = 0
    with open(path, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        for s in snapshots:
            net = s.network
            geo = net.geometry
            geo_txt = "-" if geo is None else f"{geo.n0}/{geo.mask}/{geo.stride}/{geo.dimensionality}"
            head = (f"arch={net.kind} n0={net.n0} width={net.width} geometry={geo_txt} "
                    f"activation={net.activation} biases={int(s.b is not None)} seed={s.seed} "
                    f"chain={s.chain} step={s.step}\n").encode()
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            for arr in (s.w, s.v) + ((s.b,) if s.b is not None else ()):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            count += 1
    return count


def load_snapshots(path) -> list:
    raw = Path(path).read_bytes()
    if not raw.startswith(_SNAP_MAGIC):
        raise ValueError(f"{path}: not a snapshot file")
    pos = len(_SNAP_MAGIC)
    out = []
    while pos < len(raw):
        (hlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        meta = dict(kv.split("=", 1) for kv in raw[pos:pos + hlen].decode().split())
        pos += hlen
        geo = None
        if meta["geometry"] != "-":
            n0, mask, stride, dim = (int(t) for t in meta["geometry"].split("/"))
            geo = ConvGeometry(n0, mask, stride, dim)
        net = Network(meta["arch"], int(meta["n0"]), int(meta["width"]), geo, meta["activation"],
                      bool(int(meta["biases"])))
        arrays = []
        shapes = [net.weight_shape(), net.readout_shape()] + ([net.bias_shape()] if net.biases else [])
        for shape in shapes:
            size = int(np.prod(shape))
            arrays.append(np.frombuffer(raw, "<f8", size, pos).reshape(shape).copy())
            pos += 8 * size
        seed = None if meta["seed"] == "None" else int(meta["seed"])
        out.append(ParameterSnapshot(net, arrays[0], arrays[1], arrays[2] if net.biases else None,
                                     int(meta["step"]), int(meta["chain"]), seed))
    return out
