import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize

from kernel_renorm.data import ConvGeometry, generate_linear_teacher
from kernel_renorm.kernels import LocalKernel, averaged_kernel, local_covariance, local_kernel
from kernel_renorm.saddle import (SaddleSolution, action, perturbative_qbar, reduced_action, renormalize,
                                  saddle_q, solve_saddle)


def problem(seed=0, p=10, n0=8, mask=2, stride=2, act="erf"):
    d = generate_linear_teacher(p, n0, seed)
    lk = local_kernel(local_covariance(d, ConvGeometry(n0, mask, stride), 1.0), act)
    return lk, d.labels


def fc_problem(seed=0, p=10, n0=8):
    d = generate_linear_teacher(p, n0, seed)
    return local_kernel(local_covariance(d, None, 1.0), "erf"), d.labels


def sym_basis(n):
    for i in range(n):
        for j in range(i, n):
            e = np.zeros((n, n))
            e[i, j] = e[j, i] = 1.0
            yield e


def numeric_gradient(f, x, h=1e-5):
    return np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in sym_basis(x.shape[0])])


@pytest.mark.parametrize("beta", [np.inf, 20.0])
@pytest.mark.parametrize("alpha", [0.5, 3.0])
def test_fc_solution_minimizes_reduced_action(alpha, beta):
    lk, y = fc_problem()
    sol = solve_saddle("fc", lk, y, alpha, beta, 1.0)
    assert sol.converged
    ref = optimize.minimize_scalar(lambda q: reduced_action("fc", q, lk, y, alpha, beta, 1.0),
                                   bounds=(1e-3, 50), method="bounded", options={"xatol": 1e-12})
    assert sol.qbar_for() == pytest.approx(ref.x, rel=1e-6)


def test_fc_bruteforce_fixed_point():
    lk, y = fc_problem(1)
    k = lk.block(0, 0)
    alpha, beta, lam1 = 2.0, 50.0, 1.5
    sol = solve_saddle("fc", lk, y, alpha, beta, lam1)
    qb = sol.qbar_for()
    a = np.linalg.inv(np.eye(len(y)) / beta + qb * k / lam1)
    q = alpha / (len(y) * lam1) * (np.trace(a @ k) - y @ a @ k @ a @ y)
    assert qb == pytest.approx(1 / (1 + q), rel=1e-7)


@pytest.mark.parametrize("arch", ["cnn", "lcn"])
@pytest.mark.parametrize("beta", [np.inf, 10.0])
def test_solution_is_stationary(arch, beta):
    lk, y = problem()
    sol = solve_saddle(arch, lk, y, 1.0, beta, 1.0, tol=1e-10)
    assert sol.converged and sol.positive_definite
    g = numeric_gradient(lambda m: reduced_action(arch, m, lk, y, 1.0, beta, 1.0), sol.qbar)
    if arch == "lcn":
        g = g[[k for k, e in enumerate(sym_basis(lk.n_patches)) if np.trace(e) > 0]]
    assert np.max(np.abs(g)) < 1e-6


def test_cnn_matches_direct_minimization():
    lk, y = problem(p=8, n0=4, mask=2, stride=2)
    alpha, beta = 2.0, 30.0
    sol = solve_saddle("cnn", lk, y, alpha, beta, 1.0, tol=1e-11)

    def f(theta):
        l = np.array([[np.exp(theta[0]), 0.0], [theta[1], np.exp(theta[2])]])
        return reduced_action("cnn", l @ l.T, lk, y, alpha, beta, 1.0)

    res = optimize.minimize(f, np.zeros(3), method="BFGS", options={"gtol": 1e-11})
    l = np.array([[np.exp(res.x[0]), 0.0], [res.x[1], np.exp(res.x[2])]])
    np.testing.assert_allclose(sol.qbar, l @ l.T, atol=1e-6)


def test_single_patch_cnn_is_fc():
    lk, y = fc_problem(2)
    a = solve_saddle("fc", lk, y, 1.3, np.inf, 1.0)
    b = solve_saddle("cnn", lk, y, 1.3, np.inf, 1.0)
    assert b.qbar[0, 0] == pytest.approx(a.qbar[0, 0], rel=1e-9)


def test_lcn_keeps_diagonal():
    lk, y = problem(3)
    sol = solve_saddle("lcn", lk, y, 2.0, np.inf, 1.0)
    np.testing.assert_array_equal(sol.qbar, np.diag(np.diag(sol.qbar)))


def test_zero_load_is_identity():
    lk, y = problem(4)
    sol = solve_saddle("cnn", lk, y, 0.0, np.inf, 1.0)
    np.testing.assert_allclose(sol.qbar, np.eye(lk.n_patches), atol=1e-12)
    assert sol.iterations == 0


def test_perturbative_solution_is_second_order_accurate():
    lk, y = problem(5)
    errs = []
    for alpha in (0.02, 0.01):
        exact = solve_saddle("cnn", lk, y, alpha, 10.0, 1.0, tol=1e-13).qbar
        errs.append(np.max(np.abs(exact - perturbative_qbar(lk, y, alpha, 1.0, beta=10.0))))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.15)


def test_reduced_action_equals_full_action_on_the_constraint():
    lk, y = problem(6)
    rng = np.random.default_rng(0)
    m = rng.standard_normal((4, 4)) * 0.1
    qbar = np.eye(4) + m @ m.T
    q = np.linalg.inv(qbar) - np.eye(4)
    assert reduced_action("cnn", qbar, lk, y, 1.0, 5.0, 1.0) == pytest.approx(
        action("cnn", q, qbar, lk, y, 1.0, 5.0, 1.0))


def test_saddle_q_is_action_gradient():
    lk, y = problem(7)
    rng = np.random.default_rng(1)
    m = rng.standard_normal((4, 4)) * 0.2
    qbar = np.eye(4) + m @ m.T
    q = np.zeros((4, 4))
    q_rhs, _ = saddle_q("cnn", qbar, lk, y, 1.5, 8.0, 1.0)
    grad = numeric_gradient(lambda b: action("cnn", q, b, lk, y, 1.5, 8.0, 1.0), qbar)
    # dS/dQbar_ij = -(Q_ji + Q_ij) + dData/dQbar = -2Q + 2Q(Qbar) off-diagonal, -Q + Q(Qbar) on it
    expected = np.array([q_rhs[i, j] * (1 if i == j else 2) for i in range(4) for j in range(i, 4)])
    np.testing.assert_allclose(grad, expected, rtol=1e-5, atol=1e-8)


def test_renormalized_kernel_at_identity_is_average():
    lk, _ = problem(8)
    np.testing.assert_allclose(renormalize("cnn", lk, np.eye(4), 2.0), averaged_kernel(lk, 2.0))
    np.testing.assert_allclose(renormalize("lcn", lk, np.ones(4), 2.0), averaged_kernel(lk, 2.0))


def test_solution_text_round_trip():
    lk, y = problem(9)
    sol = solve_saddle("cnn", lk, y, 1.0, np.inf, 1.0, lambda0=1.0, geometry="1d:8:2:2")
    back = SaddleSolution.from_text(sol.to_text())
    np.testing.assert_array_equal(back.qbar, sol.qbar)
    assert back.converged == sol.converged and back.geometry == sol.geometry and back.beta == np.inf
    with pytest.raises(ValueError):
        SaddleSolution.from_text("nonsense")


def test_argument_validation():
    lk, y = problem()
    with pytest.raises(ValueError):
        solve_saddle("rnn", lk, y, 1.0, np.inf, 1.0)
    with pytest.raises(ValueError):
        solve_saddle("cnn", lk, y, -1.0, np.inf, 1.0)
    with pytest.raises(ValueError):
        solve_saddle("fc", lk, y, 1.0, np.inf, 1.0)
    with pytest.raises(ValueError):
        solve_saddle("cnn", lk, y, 1.0, np.inf, 1.0, damping=0.0)


def test_unconverged_flag():
    lk, y = problem()
    sol = solve_saddle("cnn", lk, y, 5.0, np.inf, 1.0, max_iter=1)
    assert not sol.converged and sol.iterations <= 1


@given(seed=st.integers(0, 1000), alpha=st.floats(0.1, 4.0), log_beta=st.floats(0.0, 3.0),
       arch=st.sampled_from(["fc", "lcn", "cnn"]))
def test_solutions_are_positive_definite_fixed_points(seed, alpha, log_beta, arch):
    lk, y = fc_problem(seed) if arch == "fc" else problem(seed)
    beta = 10 ** log_beta
    sol = solve_saddle(arch, lk, y, alpha, beta, 1.0)
    assert sol.converged and sol.positive_definite
    np.testing.assert_allclose(np.linalg.inv(np.eye(sol.n_patches) + sol.q), sol.qbar, atol=1e-7)
    np.testing.assert_allclose(sol.qbar, sol.qbar.T, atol=1e-12)


@given(seed=st.integers(0, 1000))
def test_fc_zero_labels_closed_form(seed):
    # y = 0 at zero temperature: Q = alpha / Qbar, so Qbar = 1 - alpha for any kernel
    lk, y = fc_problem(seed)
    sol = solve_saddle("fc", lk, np.zeros_like(y), 0.5, np.inf, 1.0)
    assert sol.qbar_for() == pytest.approx(0.5, abs=1e-7)
