import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kernel_renorm.data import ConvGeometry, Dataset, generate_linear_teacher, patch_indices
from kernel_renorm.kernels import averaged_kernel, local_covariance, local_kernel
from kernel_renorm.oracle import (AdamState, DivergenceError, Network, ParameterSnapshot, TrainConfig, adam_step,
                                  block_statistics, forward, integrated_autocorr_time, langevin_step,
                                  load_snapshots, loss, loss_and_grad, mc_standard_error, measure_similarity,
                                  sample_posterior, sample_prior, save_snapshots, similarity)

GEO = ConvGeometry(8, 3, 2)


def net(kind, width=3, act="tanh", biases=False):
    return Network(kind, 8, width, None if kind == "fc" else GEO, act, biases)


def random_params(network, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(network.weight_shape())
    v = rng.standard_normal(network.readout_shape())
    b = rng.standard_normal(network.bias_shape()) if network.biases else None
    return ParameterSnapshot(network, w, v, b)


def loop_forward(network, p, x):
    """Explicit-loop network output."""
    act = np.tanh if network.activation == "tanh" else np.asarray
    idx = [np.arange(8)] if network.kind == "fc" else list(patch_indices(GEO))
    m = len(idx[0])
    out = np.zeros(len(x))
    for mu in range(len(x)):
        for i, ix in enumerate(idx):
            for a in range(network.width):
                if network.kind == "fc":
                    w, v = p.w[a], p.v[a]
                elif network.kind == "cnn":
                    w, v = p.w[a], p.v[i, a]
                else:
                    w, v = p.w[i, a], p.v[i, a]
                h = w @ x[mu, ix] / np.sqrt(m)
                if p.b is not None:
                    h += p.b[i, a] if network.kind == "lcn" else p.b[a]
                out[mu] += v * act(h)
    return out / np.sqrt(network.n1)


@pytest.mark.parametrize("kind", ["fc", "cnn", "lcn"])
@pytest.mark.parametrize("biases", [False, True])
def test_forward_matches_loops(kind, biases):
    n = net(kind, biases=biases)
    p = random_params(n)
    x = np.random.default_rng(1).standard_normal((5, 8))
    np.testing.assert_allclose(forward(n, p, x), loop_forward(n, p, x), rtol=1e-12)
    assert np.ndim(forward(n, p, x[0])) == 0


@pytest.mark.parametrize("kind", ["fc", "cnn", "lcn"])
@pytest.mark.parametrize("act", ["tanh", "erf"])
def test_gradient_matches_finite_differences(kind, act):
    n = net(kind, act=act, biases=True)
    p = random_params(n, 2)
    d = generate_linear_teacher(6, 8, 3)
    args = (d, 2.0, 3.0, 0.1)
    _, grads = loss_and_grad(n, p, *args)
    h = 1e-6
    for name, g in zip(("w", "v", "b"), grads):
        arr = getattr(p, name)
        num = np.zeros_like(arr)
        for k in np.ndindex(arr.shape):
            arr[k] += h
            up = loss(n, p, *args)
            arr[k] -= 2 * h
            down = loss(n, p, *args)
            arr[k] += h
            num[k] = (up - down) / (2 * h)
        np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-7)


def test_network_validation():
    with pytest.raises(ValueError):
        Network("rnn", 8, 2)
    with pytest.raises(ValueError):
        Network("cnn", 8, 2)
    with pytest.raises(ValueError):
        Network("cnn", 9, 2, GEO)
    with pytest.raises(ValueError):
        Network("fc", 8, 0)
    with pytest.raises(ValueError):
        ParameterSnapshot(net("cnn"), np.zeros((2, 2)), np.zeros((4, 3)))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eta=0)
    with pytest.raises(ValueError):
        TrainConfig(steps=10, burn_in=10)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")


def test_prior_similarity_mean_is_the_kernel():
    d = generate_linear_teacher(4, 8, 0)
    n = Network("cnn", 8, 4, GEO, "erf")
    lam0 = 1.0
    draws = list(sample_prior(n, lam0, 1.0, 3000, seed=7))
    o = np.stack([similarity(n, s, d.inputs) for s in draws])
    # W ~ N(0, 1/lambda0) with 1/sqrt(M) scaling: pre-activation covariance is the local covariance
    k = averaged_kernel(local_kernel(local_covariance(d, GEO, lam0), "erf"), 1.0)
    se = o.std(axis=0) / np.sqrt(len(o))
    assert np.all(np.abs(o.mean(axis=0) - k) < 4.5 * se + 1e-12)


def test_langevin_step_samples_the_gibbs_measure():
    rng = np.random.default_rng(0)
    k, temp, eta = 2.0, 0.5, 1e-2
    x = [np.zeros(20000)]
    for _ in range(2000):
        x = langevin_step(x, [k * x[0]], eta, temp, rng)
    # Euler-Maruyama stationary variance for a quadratic well: T / (k (1 - eta k / 2))
    assert x[0].var() == pytest.approx(temp / (k * (1 - eta * k / 2)), rel=0.03)


def test_langevin_step_rejects_non_finite():
    with pytest.raises(DivergenceError):
        langevin_step([np.zeros(2)], [np.array([np.nan, 0.0])], 0.1, 1.0, np.random.default_rng())


def test_adam_step_matches_hand_computation():
    p, g = [np.array([1.0, -2.0])], [np.array([0.5, 0.1])]
    st0 = AdamState.zeros_like(p)
    out = adam_step(p, g, st0, 0.1)
    # first step: mhat = g, shat = g^2, update = eta * sign(g)
    np.testing.assert_allclose(out[0], p[0] - 0.1 * g[0] / (np.abs(g[0]) + 1e-8))
    assert st0.t == 1


def small_data():
    return generate_linear_teacher(6, 8, 4)


def test_span_reduction_is_exact_for_deterministic_dynamics():
    d = small_data()
    n = Network("cnn", 8, 2, ConvGeometry(8, 1, 2), "tanh")
    tc = TrainConfig(eta=0.05, temperature=0.01, steps=40, burn_in=0, thin=20, optimizer="gd", seed=3)
    a = list(sample_posterior(n, d, 1.0, 1.0, tc, reduce=True))
    b = list(sample_posterior(n, d, 1.0, 1.0, tc, reduce=False))
    for sa, sb in zip(a, b):
        np.testing.assert_allclose(sa.w, sb.w, atol=1e-12)
        np.testing.assert_allclose(sa.v, sb.v, atol=1e-12)


def test_chains_do_not_depend_on_their_neighbours():
    d = small_data()
    n = net("cnn")
    tc = TrainConfig(eta=0.01, temperature=0.01, steps=30, burn_in=10, thin=10, seed=5)
    one = [s for s in sample_posterior(n, d, 1.0, 1.0, tc, chains=3) if s.chain == 1]
    sampler = sample_posterior(n, d, 1.0, 1.0, tc, chains=2)
    two = [s for s in sampler if s.chain == 1]
    for a, b in zip(one, two):
        np.testing.assert_allclose(a.w, b.w, rtol=1e-12)
    assert [s.step for s in one] == [20, 30]
    assert sampler.logs[0].steps[0] == 0 and np.isfinite(sampler.logs[0].final_loss)


def test_gradient_descent_lowers_the_loss():
    d = small_data()
    n = net("lcn")
    tc = TrainConfig(eta=0.05, temperature=1e-3, steps=300, burn_in=0, thin=300, optimizer="gd", seed=1)
    sampler = sample_posterior(n, d, 1.0, 1.0, tc)
    list(sampler)
    assert sampler.logs[0].losses[-1] < sampler.logs[0].losses[0]


def test_adam_trains():
    d = small_data()
    tc = TrainConfig(eta=1e-2, temperature=1e-3, steps=200, burn_in=0, thin=200, optimizer="adam", seed=1)
    sampler = sample_posterior(net("cnn"), d, 1.0, 1.0, tc)
    list(sampler)
    assert sampler.logs[0].losses[-1] < sampler.logs[0].losses[0]


def test_divergence_is_reported():
    d = Dataset(100 * np.ones((3, 8)), np.ones(3))
    tc = TrainConfig(eta=50.0, temperature=0.0, steps=500, burn_in=0, thin=1, optimizer="gd")
    with pytest.raises(DivergenceError):
        list(sample_posterior(net("fc", act="erf"), d, 1.0, 1.0, tc))


def test_paired_baseline_cancels_initialization():
    d = small_data()
    n = net("cnn")
    tc = TrainConfig(eta=1e-3, temperature=1e-3, steps=20, burn_in=0, thin=10, seed=2)
    snaps = list(sample_posterior(n, d, 1.0, 1.0, tc, chains=2, include_initial=True))
    est = measure_similarity(snaps, d, baseline="initial")
    assert est.n_chains == 2 and est.n_snapshots == 4
    assert np.max(np.abs(est.delta_k)) < 0.05
    with pytest.raises(ValueError):
        measure_similarity([s for s in snaps if s.step > 0], d, baseline="initial")
    with pytest.raises(ValueError):
        measure_similarity(snaps, d)


def test_block_statistics_brute_force():
    rng = np.random.default_rng(0)
    dk = rng.standard_normal((5, 5))
    dk = dk + dk.T
    y = np.array([0, 1, 0, 1, 1])
    st0 = block_statistics(dk, y)
    e00 = [dk[0, 2], dk[2, 0]]
    e01 = [dk[i, j] for i in (0, 2) for j in (1, 3, 4)]
    assert st0["00"].mean == pytest.approx(np.mean(e00)) and st0["00"].count == 2
    assert st0["01"].variance == pytest.approx(np.var(e01))
    assert st0["11"].count == 6
    assert not block_statistics(dk, np.zeros(5))["11"].present


def test_autocorrelation_time_of_ar1():
    rng = np.random.default_rng(0)
    phi = 0.8
    x = np.zeros(200_000)
    eps = rng.standard_normal(x.size)
    for t in range(1, x.size):
        x[t] = phi * x[t - 1] + eps[t]
    assert integrated_autocorr_time(x) == pytest.approx((1 + phi) / (1 - phi), rel=0.1)
    assert integrated_autocorr_time(rng.standard_normal(5000)) == pytest.approx(1.0, abs=0.15)


@given(st.integers(0, 1000))
def test_standard_error_of_white_noise(seed):
    x = np.random.default_rng(seed).standard_normal(2000)
    assert mc_standard_error(x) == pytest.approx(1 / np.sqrt(2000), rel=0.35)


def test_snapshot_round_trip(tmp_path):
    snaps = [random_params(net(k, biases=b), i) for i, (k, b) in enumerate([("fc", False), ("cnn", True),
                                                                          ("lcn", False)])]
    assert save_snapshots(tmp_path / "s.bin", snaps) == 3
    back = load_snapshots(tmp_path / "s.bin")
    for a, b in zip(snaps, back):
        np.testing.assert_array_equal(a.w, b.w)
        assert a.network == b.network
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_snapshots(tmp_path / "bad.bin")
