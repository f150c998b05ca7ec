import numpy as np
import pytest

from fpflow.systems import (TrapPath, harmonic_gamma, harmonic_system, make_system, ou_system,
                            soft_sphere_system, swimmer_system)


class ZeroTrap(TrapPath):
    def __call__(self, t):
        return np.zeros(self.ambient_dim)


def catalog():
    return [harmonic_system(5, 0.5, 0.25), soft_sphere_system(5, 10.0, 0.5, 5.0, 0.25),
            swimmer_system(0.1, 1.0), ou_system(np.eye(3), np.zeros(3), 0.7 * np.eye(3))]


def test_harmonic_single_particle():
    s = harmonic_system(1, 0.3, 0.25)
    x = np.array([[0.4, -1.2]])
    np.testing.assert_allclose(s.drift(0.7, x)[0], TrapPath()(0.7) - x[0], atol=1e-15)


def test_harmonic_two_particles_by_hand():
    s = harmonic_system(2, 0.5, 0.25, ZeroTrap())
    out = s.drift(0.0, np.array([[1.0, 0.0, -1.0, 0.0]]))[0]
    np.testing.assert_allclose(out, [-0.5, 0.0, 0.5, 0.0], atol=1e-15)


def test_harmonic_paper_config_dimension():
    s = make_system("harmonic", {"N": 50, "alpha": 0.5, "D": 0.25, "a": 2.0, "omega": 1.0})
    assert s.dim == 100 and s.n_particles == 50 and s.ambient_dim == 2


def test_harmonic_rejects_alpha():
    for a in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            harmonic_system(3, a, 0.25)


def test_harmonic_permutation_equivariant():
    s = harmonic_system(6, 0.5, 0.25)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 12))
    perm = rng.permutation(6)
    px = x.reshape(4, 6, 2)[:, perm].reshape(4, 12)
    np.testing.assert_allclose(s.drift(0.3, px),
                               s.drift(0.3, x).reshape(4, 6, 2)[:, perm].reshape(4, 12),
                               atol=1e-14)


def test_soft_sphere_fixed_point_at_trap():
    s = soft_sphere_system(4, 10.0, 0.5, 5.0, 0.25)
    beta = TrapPath()(0.2)
    assert np.max(np.abs(s.drift(0.2, np.tile(beta, 4)[None]))) < 1e-14


def test_soft_sphere_single_particle_by_hand():
    # B = D / (gamma_trap N r^2) = 1 with D=1, gamma_trap=1, N=1, r=1
    s = soft_sphere_system(1, 1.0, 1.0, 1.0, 1.0, ZeroTrap())
    assert s.metadata["B"] == 1.0
    np.testing.assert_allclose(s.drift(0.0, np.array([[1.0, 0.0]]))[0], [-4.0, 0.0])


def test_soft_sphere_paper_config_and_rejects():
    s = make_system("soft_sphere", {"N": 5, "A": 10.0, "r": 0.5, "gamma_trap": 5.0, "D": 0.25})
    assert s.dim == 10
    with pytest.raises(ValueError):
        soft_sphere_system(5, -1.0, 0.5, 5.0, 0.25)


def test_soft_sphere_pair_forces_antisymmetric():
    # subtract the one-body trap force, leaving the pair interactions
    s = soft_sphere_system(2, 3.0, 0.7, 5.0, 0.25, ZeroTrap())
    x = np.array([[0.3, -0.2, -0.1, 0.4]])
    p = x.reshape(2, 2)
    B = s.metadata["B"]
    trap_force = -4.0 * B * p * np.sum(p * p, axis=1, keepdims=True)
    pair = s.drift(0.0, x).reshape(2, 2) - trap_force
    np.testing.assert_allclose(pair[0], -pair[1], atol=1e-14)
    assert np.linalg.norm(pair[0]) > 0


def test_swimmer_drift_examples():
    s = swimmer_system(0.1, 1.0)
    np.testing.assert_array_equal(s.drift(0.0, np.zeros((1, 2)))[0], [0.0, 0.0])
    np.testing.assert_allclose(s.drift(0.0, np.array([[1.0, 1.0]]))[0], [0.0, -0.1])


def test_swimmer_noise_only_in_velocity():
    s = swimmer_system(0.1, 1.0)
    assert s.sigma.shape == (2, 1)
    # SDE noise amplitude sqrt(2) * sigma equals sqrt(2 gamma D) on v
    np.testing.assert_allclose(np.sqrt(2) * s.sigma[:, 0], [0.0, np.sqrt(0.2)])
    np.testing.assert_allclose(s.diffusion(), [[0.0, 0.0], [0.0, 0.1]])


def test_ou_drift():
    s = ou_system(np.eye(2), np.zeros(2), np.eye(2))
    np.testing.assert_array_equal(s.drift(0.0, np.ones((1, 2)))[0], [-1.0, -1.0])
    with pytest.raises(ValueError):
        ou_system(np.eye(2), np.zeros(2), np.eye(3))


def test_ou_warns_on_unstable_gamma():
    with pytest.warns(RuntimeWarning):
        ou_system(-np.eye(2), np.zeros(2), np.eye(2))


def test_harmonic_equals_block_ou():
    N, dbar, alpha, D = 4, 2, 0.5, 0.25
    trap = TrapPath()
    h = harmonic_system(N, alpha, D, trap)
    o = ou_system(harmonic_gamma(N, dbar, alpha), lambda t: np.tile(trap(t), N),
                  np.sqrt(D) * np.eye(N * dbar))
    x = np.random.default_rng(1).normal(size=(20, N * dbar))
    for t in (0.0, 0.37, 1.5):
        np.testing.assert_allclose(h.drift(t, x), o.drift(t, x), atol=1e-12)


def test_detailed_balance_flag():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    D = 0.5 * np.eye(2)
    assert ou_system(D @ A, np.zeros(2), np.sqrt(0.5) * np.eye(2)).metadata["detailed_balance"]
    rot = np.array([[1.0, 1.0], [-1.0, 1.0]])
    assert not ou_system(rot, np.zeros(2), np.eye(2)).metadata["detailed_balance"]


def test_sigma_factor_reproduces_D():
    rng = np.random.default_rng(2)
    for s in catalog():
        for _ in range(100):
            t = rng.uniform(0, 10)
            x = rng.normal(size=(1, s.dim))
            S = s.sigma_at(t, x)
            np.testing.assert_allclose(S @ S.T, s.diffusion(t, x), atol=1e-12)
            Dm = s.diffusion(t, x)
            assert np.allclose(Dm, Dm.T) and np.linalg.eigvalsh(Dm).min() >= -1e-14
        assert np.all(s.div_diffusion(0.0, rng.normal(size=(3, s.dim))) == 0)


def test_trap_bounded():
    for mode in ("circular", "linear"):
        tr = TrapPath(2.0, 1.0, mode)
        for t in np.linspace(0, 10, 101):
            assert np.linalg.norm(tr(t)) <= 2.0 + 1e-12


def test_make_system_rejects_unknown():
    with pytest.raises(KeyError):
        make_system("swimmer", {"gamma": 0.1, "D": 1.0, "bogus": 1})
    with pytest.raises(KeyError):
        make_system("nope", {})


def test_velocity_is_drift_minus_D_score():
    s = swimmer_system(0.1, 1.0)
    x = np.array([[0.5, -0.3]])
    sc = np.array([[2.0, 3.0]])
    np.testing.assert_allclose(s.velocity(0.0, x, sc), s.drift(0.0, x) - np.array([[0.0, 0.3]]))
