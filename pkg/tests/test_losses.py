import numpy as np
import pytest

from fpflow.losses import (LossConfig, denoising_loss_and_grad, divergence_doubling,
                           exact_divergence_fd, explicit_loss_and_grad, loss_and_grad)
from fpflow.scores import DirectScore, GaussianScore, PotentialScore
from fpflow.systems import ou_system, swimmer_system


class FnScore:
    """Parameter-free score from a callable, for estimator checks."""

    n_params = 0

    def __init__(self, f):
        self.f = f

    def score(self, x):
        return self.f(np.atleast_2d(x))

    def param_grad(self, x, adjoint):
        return np.zeros(0)


class LinearScore:
    """``s(y) = theta * y`` with a single parameter."""

    def __init__(self, theta):
        self.theta = np.array([float(theta)])
        self.n_params = 1

    def score(self, x):
        return self.theta[0] * np.atleast_2d(x)

    def param_grad(self, x, adjoint):
        return np.array([np.sum(adjoint * np.atleast_2d(x))])


def fd_theta(model, f, eps=1e-5):
    th0 = model.theta.copy()
    g = np.zeros_like(th0)
    for k in range(th0.size):
        tp, tm = th0.copy(), th0.copy()
        tp[k] += eps
        tm[k] -= eps
        model.theta = tp
        fp = f()
        model.theta = tm
        g[k] = (fp - f()) / (2 * eps)
    model.theta = th0
    return g


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(kind="sliced")
    with pytest.raises(ValueError):
        LossConfig(alpha=0.0)
    with pytest.raises(ValueError):
        LossConfig(divergence="hutchinson")


def test_explicit_zero_score():
    x = np.random.default_rng(0).normal(size=(20, 2))
    m = FnScore(np.zeros_like)
    loss, _ = explicit_loss_and_grad(m, x, np.eye(2), xi=np.ones((20, 2)))
    assert loss == 0.0


def test_explicit_population_value():
    rng = np.random.default_rng(1)
    n = 20000
    x = rng.normal(size=(n, 1))
    xi = rng.normal(size=(n, 1))
    loss, _ = explicit_loss_and_grad(FnScore(lambda y: -y), x, np.eye(1), xi=xi)
    # per-sample terms x^2 - 2 xi^2
    se = np.std(x[:, 0] ** 2 - 2 * xi[:, 0] ** 2) / np.sqrt(n)
    assert abs(loss + 1.0) < 5 * se


def test_explicit_minimiser_is_analytic_score():
    x = np.random.default_rng(2).normal(0, 0.7, size=(5000, 1))
    cs = np.linspace(0.3, 0.7, 401)
    losses = [explicit_loss_and_grad(GaussianScore([0.0], [[c]]), x, np.eye(1),
                                     divergence="exact")[0] for c in cs]
    assert abs(cs[int(np.argmin(losses))] - np.mean(x ** 2)) <= 1e-3


def test_denoising_single_point_minimiser():
    a = 0.1
    xi = np.random.default_rng(3).normal(size=(1, 3))
    m = FnScore(lambda y: -y / a ** 2)
    for doubling in (True, False):
        loss, _ = denoising_loss_and_grad(m, np.zeros((1, 3)), a, xi, doubling=doubling)
        assert loss == pytest.approx(0.0, abs=1e-20)


def test_denoising_population_minimiser():
    rng = np.random.default_rng(4)
    n, s0, a = 50000, 0.5, 0.3
    x = rng.normal(0, s0, size=(n, 1))
    xi = rng.normal(size=(n, 1))
    m = LinearScore(0.0)
    g0 = denoising_loss_and_grad(m, x, a, xi)[1][0]
    m.theta[0] = -1.0
    g1 = denoising_loss_and_grad(m, x, a, xi)[1][0]
    theta_star = -g0 / (g0 - g1)  # gradient is affine in theta
    assert theta_star == pytest.approx(-1.0 / (s0 ** 2 + a ** 2), rel=0.02)


def test_doubling_cubic_bias_exact():
    m = FnScore(lambda y: y ** 3)
    for a in (0.1, 0.05, 0.025):
        est = divergence_doubling(m, np.array([[1.0]]), a, np.array([[1.0]]))[0]
        assert abs((est - 3.0) - a ** 2) < 1e-10


def test_doubling_linear_exact_in_mean():
    A = np.array([[1.0, 2.0, 0.0], [0.5, -3.0, 1.0], [0.0, 0.2, 0.7]])
    m = FnScore(lambda y: y @ A.T)
    rng = np.random.default_rng(5)
    xi = rng.normal(size=(1, 3))
    est = divergence_doubling(m, rng.normal(size=(1, 3)), 0.37, xi)[0]
    assert est == pytest.approx(xi[0] @ A @ xi[0], rel=1e-12)
    xi = rng.normal(size=(40000, 3))
    ests = divergence_doubling(m, np.zeros((40000, 3)), 0.5, xi)
    assert abs(ests.mean() - np.trace(A)) < 5 * ests.std() / np.sqrt(40000)
    neg = divergence_doubling(FnScore(lambda y: -y), np.zeros((40000, 4)), 0.1,
                              rng.normal(size=(40000, 4)))
    assert abs(neg.mean() + 4) < 5 * neg.std() / np.sqrt(40000)


def test_doubling_sigma_weighted_is_trace_D_grad_s():
    A = np.array([[1.0, 2.0], [0.5, -3.0]])
    sig = np.array([[0.0], [0.8]])
    m = FnScore(lambda y: y @ A.T)
    xi = np.random.default_rng(6).normal(size=(30000, 1))
    # the estimator uses a relative scale; tr(D A) with D = sig sig^T
    ests = divergence_doubling(m, np.zeros((30000, 2)), 0.05, xi, sig)
    assert abs(ests.mean() - np.trace(sig @ sig.T @ A)) < 5 * ests.std() / np.sqrt(30000)


def test_exact_divergence_examples():
    assert exact_divergence_fd(FnScore(lambda y: -y), np.ones((1, 3)))[0] == pytest.approx(-3.0)
    C = np.array([[0.5, 0.1], [0.1, 0.3]])
    g = GaussianScore(np.zeros(2), C)
    assert exact_divergence_fd(g, np.ones((1, 2)))[0] == pytest.approx(-np.trace(np.linalg.inv(C)))
    with pytest.raises(ValueError):
        exact_divergence_fd(g, np.ones((1, 11)))


def test_doubling_matches_exact_divergence_on_mlp():
    m = DirectScore.create(3, (16, 16), np.random.default_rng(7))
    x = np.tile(np.random.default_rng(8).normal(size=(1, 3)), (10000, 1))
    ests = divergence_doubling(m, x, 1e-3, np.random.default_rng(9).normal(size=(10000, 3)))
    exact = exact_divergence_fd(m, x[:1])[0]
    assert abs(ests.mean() - exact) < 5 * ests.std() / np.sqrt(10000)


def small_potential(seed=10):
    m = PotentialScore.create(2, 2, (6,), np.random.default_rng(seed))
    m.theta = m.theta + 0.2 * np.random.default_rng(seed + 1).normal(size=m.n_params)
    return m


@pytest.mark.parametrize("doubling", [True, False])
def test_denoising_grad_fd(doubling):
    m = small_potential()
    rng = np.random.default_rng(12)
    x, xi = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    _, g = denoising_loss_and_grad(m, x, 0.1, xi, doubling=doubling)
    fd = fd_theta(m, lambda: denoising_loss_and_grad(m, x, 0.1, xi, doubling=doubling)[0])
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


@pytest.mark.parametrize("divergence", ["doubling", "exact"])
def test_explicit_grad_fd(divergence):
    m = small_potential()
    rng = np.random.default_rng(13)
    x, xi = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    D = np.diag([0.3, 0.5, 0.2, 0.4])
    dd = rng.normal(size=(8, 4))

    def f():
        return explicit_loss_and_grad(m, x, D, 0.05, xi, np.sqrt(D), dd, divergence)[0]

    _, g = explicit_loss_and_grad(m, x, D, 0.05, xi, np.sqrt(D), dd, divergence)
    fd = fd_theta(m, f)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


def test_denoising_grad_fd_rank_deficient_sigma():
    m = DirectScore.create(2, (8,), np.random.default_rng(14), output_index=[1],
                           antisymmetric=True)
    sys_ = swimmer_system(0.1, 1.0)
    rng = np.random.default_rng(15)
    x, xi = rng.normal(size=(10, 2)), rng.normal(size=(10, 1))
    _, g = denoising_loss_and_grad(m, x, 0.05, xi, sys_.sigma)
    fd = fd_theta(m, lambda: denoising_loss_and_grad(m, x, 0.05, xi, sys_.sigma)[0])
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


def test_denoising_and_explicit_gradients_agree_small_alpha():
    m = DirectScore.create(2, (8,), np.random.default_rng(16))
    rng = np.random.default_rng(17)
    base = rng.normal(size=(200, 2))
    x = np.repeat(base, 50, axis=0)  # 10^4 noise draws
    xi = rng.normal(size=x.shape)
    _, g_ex = explicit_loss_and_grad(m, base, np.eye(2), divergence="exact")
    _, g_dn = denoising_loss_and_grad(m, x, 1e-2, xi)
    cos = g_ex @ g_dn / (np.linalg.norm(g_ex) * np.linalg.norm(g_dn))
    assert cos >= 0.99


def test_loss_dispatch_uses_system_noise_rank():
    m = DirectScore.create(2, (4,), np.random.default_rng(18), output_index=[1])
    sys_ = swimmer_system(0.1, 1.0)
    x = np.random.default_rng(19).normal(size=(5, 2))
    l1, g1 = loss_and_grad(m, x, LossConfig(), sys_, 0.0, np.random.default_rng(0))
    l2, g2 = loss_and_grad(m, x, LossConfig(), sys_, 0.0, np.random.default_rng(0))
    assert l1 == l2 and np.array_equal(g1, g2)
    o = ou_system(np.eye(2), np.zeros(2), np.eye(2))
    le, _ = loss_and_grad(m, x, LossConfig(kind="explicit", alpha=1e-3), o, 0.0,
                          np.random.default_rng(0))
    assert np.isfinite(le)


def test_nonfinite_loss_raises():
    m = FnScore(lambda y: np.full_like(y, np.inf))
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        explicit_loss_and_grad(m, np.ones((2, 1)), np.eye(1), xi=np.ones((2, 1)))
