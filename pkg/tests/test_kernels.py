import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, special

from kernel_renorm.data import ConvGeometry, generate_linear_teacher
from kernel_renorm.kernels import (KernelFileError, LocalKernel, averaged_kernel, get_activation, global_covariance,
                                   hermite_rule, kernel_map, kernel_matrix, kolmogorov_rule, load_kernel,
                                   local_covariance, local_kernel, save_kernel)
from kernel_renorm.kernels import test_kernel_vectors as kernel_vectors


def arcsine(c11, c22, c12):
    return 2 / np.pi * np.arcsin(2 * c12 / np.sqrt((1 + 2 * c11) * (1 + 2 * c22)))


def dblquad_kernel(f, c11, c22, c12):
    """Direct two-dimensional integration of E[f(t1) f(t2)]."""
    cov = np.array([[c11, c12], [c12, c22]])
    chol = np.linalg.cholesky(cov + 1e-300 * np.eye(2))

    def integrand(z2, z1):
        t = chol @ np.array([z1, z2])
        return f(t[0]) * f(t[1]) * np.exp(-(z1 * z1 + z2 * z2) / 2) / (2 * np.pi)

    val, _ = integrate.dblquad(integrand, -9, 9, -9, 9, epsabs=1e-11, epsrel=1e-11)
    return val


blocks = st.tuples(st.floats(0.05, 5.0), st.floats(0.05, 5.0), st.floats(-0.999, 0.999)).map(
    lambda t: (t[0], t[1], t[2] * np.sqrt(t[0] * t[1])))


def test_erf_closed_form_matches_arcsine_formula():
    # erf with unit argument scaling: E[erf(t1) erf(t2)]
    for c11, c22, c12 in [(1.0, 1.0, 0.3), (2.0, 0.5, -0.7), (0.1, 3.0, 0.5)]:
        assert kernel_map(c11, c22, c12, "erf") == pytest.approx(arcsine(c11, c22, c12), abs=1e-14)


@pytest.mark.parametrize("c", [(1.0, 1.0, 0.3), (2.0, 0.5, -0.7)])
def test_erf_closed_form_matches_direct_integration(c):
    assert kernel_map(*c, "erf") == pytest.approx(dblquad_kernel(special.erf, *c), abs=1e-8)


@pytest.mark.parametrize("c", [(1.0, 1.0, 0.3), (4.0, 0.5, -1.2), (0.2, 0.2, 0.19)])
def test_tanh_mixture_matches_direct_integration(c):
    assert kernel_map(*c, "tanh") == pytest.approx(dblquad_kernel(np.tanh, *c), abs=1e-8)


@given(blocks)
def test_tanh_mixture_matches_hermite(c):
    a = kernel_map(*c, "tanh")
    b = kernel_map(*c, "tanh", method="hermite", order=240)
    assert a == pytest.approx(b, abs=1e-7)


@given(blocks)
def test_erf_hermite_agrees_with_closed_form(c):
    a = kernel_map(*c, "erf")
    b = kernel_map(*c, "erf", method="hermite", order=160)
    assert a == pytest.approx(b, abs=1e-7)


def test_tanh_monte_carlo():
    rng = np.random.default_rng(0)
    cov = np.array([[1.5, 0.6], [0.6, 0.8]])
    t = rng.multivariate_normal([0, 0], cov, size=400_000)
    mc = np.mean(np.tanh(t[:, 0]) * np.tanh(t[:, 1]))
    se = np.std(np.tanh(t[:, 0]) * np.tanh(t[:, 1])) / np.sqrt(len(t))
    assert abs(kernel_map(1.5, 0.8, 0.6, "tanh") - mc) < 4 * se


def test_kolmogorov_rule_is_normalized_and_reproduces_tanh():
    nodes, weights = kolmogorov_rule()
    assert weights.sum() == pytest.approx(1.0, abs=1e-13)
    x = np.linspace(-6, 6, 41)
    mix = special.erf(x[:, None] / (np.sqrt(2) * nodes[None, :])) @ weights
    np.testing.assert_allclose(mix, np.tanh(x), atol=1e-12)


def test_hermite_rule_integrates_gaussian_moments():
    z, w = hermite_rule(20)
    assert w.sum() == pytest.approx(1.0)
    assert np.sum(w * z ** 2) == pytest.approx(1.0)
    assert np.sum(w * z ** 4) == pytest.approx(3.0)


def test_linear_kernel_is_covariance():
    assert kernel_map(2.0, 3.0, 1.1, "linear") == 1.1


def test_zero_variance_gives_zero():
    assert kernel_map(0.0, 1.0, 0.0, "tanh") == 0.0
    assert kernel_map(0.0, 1.0, 0.0, "erf") == 0.0


def test_non_psd_block_raises():
    with pytest.raises(ValueError, match="semidefinite"):
        kernel_map(1.0, 1.0, 1.5, "erf")
    with pytest.raises(ValueError, match="negative"):
        kernel_map(-1.0, 1.0, 0.0, "erf")


def test_unsupported_activation():
    with pytest.raises(ValueError, match="odd"):
        get_activation("relu")
    with pytest.raises(ValueError):
        kernel_map(1.0, 1.0, 0.0, "tanh", method="exact")


@pytest.mark.parametrize("kind", ["linear", "erf", "tanh"])
def test_activation_derivative(kind):
    act = get_activation(kind)
    x = np.linspace(-2, 2, 9)
    h = 1e-6
    np.testing.assert_allclose(act.derivative(x), (act(x + h) - act(x - h)) / (2 * h), atol=1e-8)
    np.testing.assert_allclose(act.derivative_from_output(x, act(x)), act.derivative(x), atol=1e-14)


@given(st.integers(0, 10_000), st.sampled_from(["erf", "tanh"]))
def test_kernel_matrix_is_symmetric_psd(seed, act):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((12, 5))
    k = kernel_matrix(global_covariance(x, 1.0), act)
    np.testing.assert_array_equal(k, k.T)
    assert np.linalg.eigvalsh(k)[0] > -1e-10


@given(st.integers(0, 10_000))
def test_kernel_is_odd_in_the_covariance(seed):
    rng = np.random.default_rng(seed)
    c11, c22 = rng.uniform(0.1, 3, 2)
    c12 = rng.uniform(-1, 1) * np.sqrt(c11 * c22)
    for act in ("erf", "tanh"):
        assert kernel_map(c11, c22, -c12, act) == pytest.approx(-kernel_map(c11, c22, c12, act), abs=1e-14)


def test_global_covariance_definition():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_allclose(global_covariance(x, 2.0), x @ x.T / 6.0)


def test_single_patch_local_covariance_is_global():
    d = generate_linear_teacher(7, 9, 0)
    lc = local_covariance(d, None, 2.0)
    np.testing.assert_allclose(lc.block(0, 0), global_covariance(d, 2.0))


def test_local_covariance_brute_force():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 8))
    geo = ConvGeometry(8, 3, 2)
    lc = local_covariance(x, geo, 1.5)
    for i in range(4):
        for j in range(4):
            pi = [(2 * i + m - 1) % 8 for m in range(3)]
            pj = [(2 * j + m - 1) % 8 for m in range(3)]
            np.testing.assert_allclose(lc.block(i, j), x[:, pi] @ x[:, pj].T / (1.5 * 3))


def test_local_kernel_views_are_consistent():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 8))
    lk = local_kernel(local_covariance(x, ConvGeometry(8, 2, 2), 1.0), "erf")
    assert lk.n_patterns == 5 and lk.n_patches == 4
    np.testing.assert_allclose(lk.blocks[1, 2], lk.block(1, 2))
    np.testing.assert_allclose(lk.diagonal[3], lk.block(3, 3))
    np.testing.assert_allclose(averaged_kernel(lk, 2.0), sum(lk.block(i, i) for i in range(4)) / 8.0)
    np.testing.assert_allclose(lk.matrix(), lk.matrix().T)
    off = lk.without_cross_patch()
    assert np.all(off.block(0, 1) == 0) and np.all(off.block(2, 2) == lk.block(2, 2))


def test_local_kernel_rejects_bad_shape():
    with pytest.raises(ValueError):
        LocalKernel(np.zeros((2, 3, 2, 2)))


def test_test_vectors_match_joint_kernel():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 8))
    x0 = rng.standard_normal((2, 8))
    geo = ConvGeometry(8, 3, 2)
    joint = local_kernel(local_covariance(np.vstack([x, x0]), geo, 0.7), "tanh")
    tkv = kernel_vectors(x, x0, geo, "tanh", 0.7)
    for t in range(2):
        for i in range(4):
            for j in range(4):
                np.testing.assert_allclose(tkv.kappa[t, i, j], joint.values[:6, i, 6 + t, j], atol=1e-13)
                assert tkv.kappa0[t, i, j] == pytest.approx(joint.values[6 + t, i, 6 + t, j], abs=1e-13)


def test_test_vector_dimension_mismatch():
    with pytest.raises(ValueError):
        kernel_vectors(np.ones((2, 4)), np.ones(3), None)


def test_kernel_file_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    lk = local_kernel(local_covariance(rng.standard_normal((3, 4)), ConvGeometry(4, 1, 1), 1.0), "erf")
    save_kernel(tmp_path / "k.bin", lk)
    back = load_kernel(tmp_path / "k.bin")
    np.testing.assert_array_equal(back.values, lk.values)
    assert back.activation == "erf" and back.lambda0 == 1.0


def test_kernel_file_global_matrix(tmp_path):
    k = np.eye(3)
    save_kernel(tmp_path / "k.bin", k, "linear", 2.0)
    np.testing.assert_array_equal(load_kernel(tmp_path / "k.bin").block(0, 0), k)
    with pytest.raises(ValueError):
        save_kernel(tmp_path / "k2.bin", k)


@pytest.mark.parametrize("old, new, field", [(b"P=3", b"P=x", "P"), (b"activation=erf", b"activation=relu", "activation"),
                                            (b"lambda0=1.0", b"lambda0=abc", "lambda0"), (b" dtype=<f8", b"", "dtype")])
def test_kernel_file_bad_header_names_field(tmp_path, old, new, field):
    save_kernel(tmp_path / "k.bin", np.eye(3), "erf", 1.0)
    raw = (tmp_path / "k.bin").read_bytes()
    (tmp_path / "k.bin").write_bytes(raw.replace(old, new, 1))
    with pytest.raises(KernelFileError, match=field):
        load_kernel(tmp_path / "k.bin")


def test_kernel_file_truncated(tmp_path):
    save_kernel(tmp_path / "k.bin", np.eye(3), "erf", 1.0)
    raw = (tmp_path / "k.bin").read_bytes()
    (tmp_path / "k.bin").write_bytes(raw[:-8])
    with pytest.raises(KernelFileError, match="payload"):
        load_kernel(tmp_path / "k.bin")
    (tmp_path / "k.bin").write_bytes(b"junk\n" + raw)
    with pytest.raises(KernelFileError, match="magic"):
        load_kernel(tmp_path / "k.bin")
