import csv
import time

import numpy as np
import pytest

from fpflow.oracle import (GaussianState, OUOracle, SymmetricMoments, fisher_relative,
                           gaussian_entropy, gaussian_logpdf, harmonic_moments_integrate,
                           linear_flow_rhs, linear_flow_step, lyapunov_solve,
                           ou_moments_integrate, precision_integrate, write_trajectory_csv)
from fpflow.systems import TrapPath, harmonic_gamma


def c_exact(t):
    return 1.0 - 0.75 * np.exp(-2.0 * t)


OU1 = dict(Gamma=[[1.0]], b=[0.0], D=[[1.0]])
S0 = GaussianState([0.0], [[0.25]])


def test_ou_1d_closed_form():
    tr = ou_moments_integrate(**OU1, state0=S0, t_grid=[0.0, 1.0], dt=1e-3)
    assert abs(tr[-1].cov[0, 0] - 0.8984985) < 1e-7
    assert abs(tr[-1].cov[0, 0] / c_exact(1.0) - 1) < 1e-8
    assert tr[-1].t == 1.0


def test_ou_convergence_order():
    errs = []
    for dt in (0.1, 0.05, 0.025):
        C = ou_moments_integrate(**OU1, state0=S0, t_grid=[0.0, 1.0], dt=dt)[-1].cov[0, 0]
        errs.append(abs(C - c_exact(1.0)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.8)


def test_stationary_start_is_fixed_point():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    Gamma = A @ A.T + 3 * np.eye(3) + 0.3 * (A - A.T)
    D = np.diag([0.5, 1.0, 0.2])
    Cinf = lyapunov_solve(Gamma, D)
    tr = ou_moments_integrate(Gamma, np.zeros(3), D, GaussianState(np.zeros(3), Cinf),
                              np.linspace(0, 2, 5))
    for st in tr:
        np.testing.assert_allclose(st.cov, Cinf, atol=1e-10)


def test_driven_mean_closed_form():
    w = 1.0
    b = lambda t: np.array([np.cos(np.pi * w * t)])  # noqa: E731
    m0 = 0.7
    tr = ou_moments_integrate([[1.0]], b, [[0.5]], GaussianState([m0], [[1.0]]),
                              np.linspace(0, 3, 7))
    for st in tr:
        t = st.t
        k = np.pi * w
        exact = m0 * np.exp(-t) + (np.cos(k * t) + k * np.sin(k * t) - np.exp(-t)) / (1 + k * k)
        assert abs(st.mean[0] - exact) < 1e-10


def test_pd_loss_detected():
    with pytest.raises(np.linalg.LinAlgError):
        ou_moments_integrate([[1.0]], [0.0], [[-5.0]], S0, [0.0, 1.0], dt=1e-2)


def test_harmonic_stationary_values():
    init = SymmetricMoments(np.zeros(2), 0.0625 * np.eye(2), np.zeros((2, 2)), 5)
    class Zero(TrapPath):
        def __call__(self, t):
            return np.zeros(2)
    tr = harmonic_moments_integrate(5, 2, 0.5, 0.25, Zero(), init, [0.0, 40.0], dt=1e-2)
    np.testing.assert_allclose(tr[-1].c_diag, 0.45 * np.eye(2), atol=1e-9)
    np.testing.assert_allclose(tr[-1].c_off, -0.05 * np.eye(2), atol=1e-9)


def test_harmonic_decoupled_limit():
    init = SymmetricMoments(np.zeros(2), 0.0625 * np.eye(2), np.zeros((2, 2)), 4)
    tr = harmonic_moments_integrate(4, 2, 1e-12, 0.25, TrapPath(), init, [0.0, 30.0], dt=1e-2)
    np.testing.assert_allclose(tr[-1].c_diag, 0.25 * np.eye(2), atol=1e-9)
    np.testing.assert_allclose(tr[-1].c_off, 0.0, atol=1e-9)


def test_harmonic_reduced_matches_full():
    N, dbar, alpha, D = 4, 2, 0.5, 0.25
    trap = TrapPath()
    init = SymmetricMoments(trap(0.0), 0.0625 * np.eye(2), np.zeros((2, 2)), N)
    grid = np.linspace(0, 2, 9)
    red = harmonic_moments_integrate(N, dbar, alpha, D, trap, init, grid)
    full = ou_moments_integrate(harmonic_gamma(N, dbar, alpha), lambda t: np.tile(trap(t), N),
                                D * np.eye(N * dbar), init.full(), grid)
    for r, f in zip(red, full):
        np.testing.assert_allclose(r.full().cov, f.cov, atol=1e-8)
        np.testing.assert_allclose(r.full().mean, f.mean, atol=1e-8)
        assert r.cov_trace() == pytest.approx(np.trace(f.cov), abs=1e-8)


def test_linear_flow_examples():
    dX, dG = linear_flow_rhs(np.eye(1), np.zeros(1), np.eye(1), S0, np.array([[1.0]]),
                             np.array([[1.0]]))
    assert dX[0, 0] == pytest.approx(3.0)
    # detailed balance at stationarity: Gamma = D A, C = A^-1
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    D = np.diag([0.5, 2.0])
    st = GaussianState(np.zeros(2), np.linalg.inv(A))
    X = np.random.default_rng(0).normal(size=(5, 2))
    dX, dG = linear_flow_rhs(D @ A, np.zeros(2), D, st, X, X.copy())
    assert np.max(np.abs(dX)) < 1e-12 and np.max(np.abs(dG)) < 1e-12


def test_linear_flow_pushforward_and_G():
    rng = np.random.default_rng(1)
    n = 20000
    Gamma = np.array([[1.0, 0.4], [-0.2, 0.8]])
    D = np.array([[0.6, 0.1], [0.1, 0.3]])
    s0 = GaussianState(np.array([0.5, -0.5]), np.array([[0.3, 0.05], [0.05, 0.2]]))
    orc = OUOracle(Gamma, np.zeros(2), D, s0, dt=1e-3)
    X = rng.multivariate_normal(s0.mean, s0.cov, size=n)
    G = s0.score(X)
    t, dt = 0.0, 0.01
    for _ in range(100):
        X, G = linear_flow_step(Gamma, np.zeros(2), D, orc.state_at, t, X, G, dt)
        t += dt
    st = orc.state_at(1.0)
    C = np.cov(X.T)
    se = np.sqrt((st.cov ** 2 + np.outer(np.diag(st.cov), np.diag(st.cov))) / n)
    assert np.all(np.abs(C - st.cov) < 5 * se)
    P = st.precision()
    B = G.T @ G / n
    seB = np.sqrt((P ** 2 + np.outer(np.diag(P), np.diag(P))) / n)
    assert np.all(np.abs(B - P) < 5 * seB)
    np.testing.assert_allclose(G, st.score(X), atol=1e-7)


def test_precision_ode_matches_inverse():
    Gamma = np.array([[1.0, 0.4], [-0.2, 0.8]])
    D = np.array([[0.6, 0.1], [0.1, 0.3]])
    s0 = GaussianState(np.zeros(2), np.array([[0.3, 0.05], [0.05, 0.2]]))
    grid = [0.0, 0.5, 1.0, 2.0]
    Bs = precision_integrate(Gamma, D, np.linalg.inv(s0.cov), grid)
    Cs = ou_moments_integrate(Gamma, np.zeros(2), D, s0, grid)
    for B, C in zip(Bs, Cs):
        np.testing.assert_allclose(B, np.linalg.inv(C.cov), atol=1e-8)


def test_lyapunov():
    np.testing.assert_allclose(lyapunov_solve(np.eye(3), np.eye(3)), np.eye(3), atol=1e-14)
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    D = np.diag([0.5, 2.0])
    np.testing.assert_allclose(lyapunov_solve(D @ A, D), np.linalg.inv(A), atol=1e-12)
    rng = np.random.default_rng(2)
    M = rng.normal(size=(3, 3))
    G = M @ M.T + np.eye(3)
    Dm = np.eye(3) + 0.1 * np.ones((3, 3))
    C = lyapunov_solve(G, Dm)
    assert np.max(np.abs(G @ C + C @ G.T - 2 * Dm)) <= 1e-10


def test_lyapunov_singular():
    with pytest.raises(np.linalg.LinAlgError):
        lyapunov_solve(np.zeros((2, 2)), np.eye(2))


def test_entropy_examples():
    assert gaussian_entropy(S0) == pytest.approx(0.7257913, abs=1e-7)
    assert gaussian_entropy(GaussianState(np.zeros(4), np.eye(4))) == pytest.approx(4 * 1.4189385,
                                                                                   abs=1e-6)
    C1 = ou_moments_integrate(**OU1, state0=S0, t_grid=[0.0, 1.0])[-1]
    dH = gaussian_entropy(C1) - gaussian_entropy(S0)
    assert dH == pytest.approx(0.5 * np.log(c_exact(1.0) / 0.25), abs=1e-9)
    with pytest.raises(np.linalg.LinAlgError):
        gaussian_entropy(GaussianState([0.0], [[-1.0]]))


def test_logpdf_matches_scipy():
    from scipy.stats import multivariate_normal
    st = GaussianState([0.2, -0.1], [[0.5, 0.1], [0.1, 0.3]])
    x = np.random.default_rng(3).normal(size=(6, 2))
    np.testing.assert_allclose(gaussian_logpdf(st, x),
                               multivariate_normal(st.mean, st.cov).logpdf(x), rtol=1e-12)


def test_fisher_relative_examples():
    st = GaussianState([0.0, 1.0], [[0.5, 0.1], [0.1, 0.3]])
    x = np.random.default_rng(4).normal(size=(50, 2))
    ref = st.score(x)
    assert fisher_relative(ref, st, x) == 0.0
    assert fisher_relative(np.zeros_like(ref), st, x) == pytest.approx(1.0)
    assert fisher_relative(1.1 * ref, st, x) == pytest.approx(0.01)
    with pytest.raises(ZeroDivisionError):
        fisher_relative(ref, GaussianState([0.0], [[1.0]]), np.zeros((3, 1)))


def test_oracle_cache_and_backward_queries():
    orc = OUOracle(**OU1, state0=S0, dt=1e-3)
    a = orc.state_at(1.0).cov[0, 0]
    b = orc.state_at(0.5).cov[0, 0]
    assert abs(a / c_exact(1.0) - 1) < 1e-8 and abs(b / c_exact(0.5) - 1) < 1e-8
    with pytest.raises(ValueError):
        orc.state_at(-0.1)


def test_trajectory_csv(tmp_path):
    tr = ou_moments_integrate(**OU1, state0=S0, t_grid=[0.0, 0.5, 1.0])
    write_trajectory_csv(tmp_path / "o.csv", tr)
    rows = list(csv.reader(open(tmp_path / "o.csv")))
    assert rows[0] == ["t", "m_0", "C_0_0", "entropy"]
    assert float(rows[-1][2]) == pytest.approx(c_exact(1.0), rel=1e-8)


def test_ou_runtime():
    t = time.perf_counter()
    ou_moments_integrate(**OU1, state0=S0, t_grid=[0.0, 1.0], dt=1e-3)
    assert time.perf_counter() - t < 1.0
