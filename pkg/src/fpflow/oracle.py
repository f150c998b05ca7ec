"""Gaussian ground truth for linear (Ornstein-Uhlenbeck) dynamics.

For ``dx = -Gamma (x - b_t) dt + sqrt(2) sigma dW`` a Gaussian initial law stays
Gaussian, with

    dm/dt = -Gamma (m - b_t)
    dC/dt = -Gamma C - C Gamma^T + 2 D

and the probability flow is linear in ``x``. Everything here is integrated
with fixed-step RK4; covariances are re-symmetrised after every step.
"""
from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_continuous_lyapunov

from .systems import TrapPath, harmonic_gamma

__all__ = [
    "GaussianState",
    "SymmetricMoments",
    "OUOracle",
    "ou_moments_integrate",
    "harmonic_moments_integrate",
    "linear_flow_rhs",
    "linear_flow_step",
    "lyapunov_solve",
    "gaussian_entropy",
    "gaussian_logpdf",
    "fisher_relative",
    "precision_integrate",
    "write_trajectory_csv",
]


def _b_fn(b):
    if callable(b):
        return b
    arr = np.atleast_1d(np.asarray(b, dtype=np.float64))
    return lambda t: arr


def _chol(C):
    try:
        return cho_factor(C, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance lost positive definiteness") from exc


@dataclass
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match the mean")

    @property
    def dim(self) -> int:
        return self.mean.size

    def precision(self) -> np.ndarray:
        return cho_solve(_chol(self.cov), np.eye(self.dim))

    def score(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return -cho_solve(_chol(self.cov), (x - self.mean).T).T


@dataclass
class SymmetricMoments:
    """Moments of ``N`` exchangeable particles in ``dbar`` dimensions.

    The full covariance has blocks ``C_d`` on the diagonal and ``C_o`` off it.
    """

    mean: np.ndarray
    c_diag: np.ndarray
    c_off: np.ndarray
    N: int
    t: float = 0.0

    @property
    def dbar(self) -> int:
        return self.mean.size

    def full(self) -> GaussianState:
        N = self.N
        C = np.kron(np.eye(N), self.c_diag - self.c_off) + np.kron(np.ones((N, N)), self.c_off)
        return GaussianState(np.tile(self.mean, N), C, self.t)

    def cov_trace(self) -> float:
        return float(self.N * np.trace(self.c_diag))


def _rk4(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _steps(t_grid, dt):
    """Split every interval of ``t_grid`` into equal RK4 steps no longer than ``dt``."""
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or t_grid.size < 1 or np.any(np.diff(t_grid) < 0):
        raise ValueError("t_grid must be a nondecreasing 1-D sequence")
    for t0, t1 in zip(t_grid[:-1], t_grid[1:]):
        m = max(1, int(np.ceil((t1 - t0) / dt - 1e-9)))
        yield t0, t1, (t1 - t0) / m, m


def ou_moments_integrate(Gamma, b, D, state0: GaussianState, t_grid: Sequence[float],
                         dt: float = 1e-3) -> list[GaussianState]:
    """RK4 trajectory of the OU moments, reported at each time in ``t_grid``."""
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=np.float64))
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    b_fn = _b_fn(b)
    d = state0.dim
    _chol(state0.cov)

    def rhs(t, y):
        m, C = y[:d], y[d:].reshape(d, d)
        dm = -Gamma @ (m - b_fn(t))
        GC = Gamma @ C
        return np.concatenate([dm, (-GC - GC.T + 2.0 * D).ravel()])

    y = np.concatenate([state0.mean, state0.cov.ravel()])
    out = [GaussianState(state0.mean.copy(), state0.cov.copy(), float(t_grid[0]))]
    for t0, t1, h, m in _steps(t_grid, dt):
        for i in range(m):
            y = _rk4(rhs, t0 + i * h, y, h)
            C = y[d:].reshape(d, d)
            y[d:] = (0.5 * (C + C.T)).ravel()
        C = y[d:].reshape(d, d).copy()
        _chol(C)
        out.append(GaussianState(y[:d].copy(), C, float(t1)))
    return out


def harmonic_moments_integrate(N: int, dbar: int, alpha: float, D: float, trap: TrapPath,
                               init: SymmetricMoments, t_grid, dt: float = 1e-3
                               ) -> list[SymmetricMoments]:
    """Reduced moment equations for the harmonic system under the exchangeable ansatz."""
    if init.N != N or init.dbar != dbar:
        raise ValueError("initial moments do not match N and dbar")
    I = np.eye(dbar)
    k = dbar * dbar

    def rhs(t, y):
        m, Cd, Co = y[:dbar], y[dbar:dbar + k].reshape(dbar, dbar), y[dbar + k:].reshape(dbar, dbar)
        mix = (2.0 * alpha / N) * (Cd + (N - 1) * Co)
        dCd = 2.0 * (alpha - 1.0) * Cd - mix + 2.0 * D * I
        dCo = 2.0 * (alpha - 1.0) * Co - mix
        return np.concatenate([trap(t) - m, dCd.ravel(), dCo.ravel()])

    y = np.concatenate([init.mean, init.c_diag.ravel(), init.c_off.ravel()])
    out = [SymmetricMoments(init.mean.copy(), init.c_diag.copy(), init.c_off.copy(), N,
                            float(t_grid[0]))]
    for t0, t1, h, m in _steps(t_grid, dt):
        for i in range(m):
            y = _rk4(rhs, t0 + i * h, y, h)
        Cd = y[dbar:dbar + k].reshape(dbar, dbar)
        Co = y[dbar + k:].reshape(dbar, dbar)
        out.append(SymmetricMoments(y[:dbar].copy(), 0.5 * (Cd + Cd.T), 0.5 * (Co + Co.T), N, float(t1)))
    return out


def linear_flow_rhs(Gamma, b_t, D, state: GaussianState, X, G):
    """Right-hand sides of the linear probability flow and of its score along trajectories.

    ``dX/dt = (D C^-1 - Gamma) X + Gamma b - D C^-1 m`` and
    ``dG/dt = (Gamma^T - C^-1 D) G``, row-wise on batches.
    """
    P = state.precision()
    A = D @ P - Gamma
    c = Gamma @ b_t - D @ P @ state.mean
    dX = X @ A.T + c
    dG = None if G is None else G @ (Gamma.T - P @ D).T
    return dX, dG


def linear_flow_step(Gamma, b, D, state_at: Callable[[float], GaussianState], t: float,
                     X, G, dt: float):
    """One RK4 step of the exact linear flow; ``state_at(t)`` gives the moments."""
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=np.float64))
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    b_fn = _b_fn(b)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    has_g = G is not None
    G = np.atleast_2d(np.asarray(G, dtype=np.float64)) if has_g else None

    def f(tt, X_, G_):
        return linear_flow_rhs(Gamma, b_fn(tt), D, state_at(tt), X_, G_)

    k1x, k1g = f(t, X, G)
    h2 = 0.5 * dt
    k2x, k2g = f(t + h2, X + h2 * k1x, G + h2 * k1g if has_g else None)
    k3x, k3g = f(t + h2, X + h2 * k2x, G + h2 * k2g if has_g else None)
    k4x, k4g = f(t + dt, X + dt * k3x, G + dt * k3g if has_g else None)
    Xn = X + (dt / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
    Gn = G + (dt / 6.0) * (k1g + 2 * k2g + 2 * k3g + k4g) if has_g else None
    return Xn, Gn


def precision_integrate(Gamma, D, B0, t_grid, dt: float = 1e-3) -> list[np.ndarray]:
    """RK4 for ``dB/dt = B Gamma + Gamma^T B - 2 B D B`` (the precision ``C^-1``)."""
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=np.float64))
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    d = Gamma.shape[0]

    def rhs(t, y):
        B = y.reshape(d, d)
        BG = B @ Gamma
        return (BG + BG.T - 2.0 * B @ D @ B).ravel()

    y = np.asarray(B0, dtype=np.float64).ravel().copy()
    out = [y.reshape(d, d).copy()]
    for t0, _, h, m in _steps(t_grid, dt):
        for i in range(m):
            y = _rk4(rhs, t0 + i * h, y, h)
            B = y.reshape(d, d)
            y = (0.5 * (B + B.T)).ravel()
        out.append(y.reshape(d, d).copy())
    return out


def lyapunov_solve(Gamma, D) -> np.ndarray:
    """Stationary covariance: ``Gamma C + C Gamma^T = 2 D`` (Bartels-Stewart)."""
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=np.float64))
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    # eigenvalue pairs summing to zero make the Sylvester operator singular
    ev = np.linalg.eigvals(Gamma)
    gap = np.min(np.abs(ev[:, None] + ev[None, :]))
    if gap <= 1e-12 * max(1.0, float(np.max(np.abs(ev)))):
        raise np.linalg.LinAlgError("singular Lyapunov system")
    C = solve_continuous_lyapunov(Gamma, 2.0 * D)
    return 0.5 * (C + C.T)


def gaussian_entropy(state: GaussianState | np.ndarray) -> float:
    """Differential entropy in nats, ``d/2 (log 2 pi + 1) + 1/2 log det C``."""
    C = state.cov if isinstance(state, GaussianState) else np.atleast_2d(state)
    L, _ = _chol(C)
    d = C.shape[0]
    return float(0.5 * d * (np.log(2.0 * np.pi) + 1.0) + np.sum(np.log(np.diag(L))))


def gaussian_logpdf(state: GaussianState, x) -> np.ndarray:
    x = np.atleast_2d(x)
    cf = _chol(state.cov)
    r = x - state.mean
    q = np.sum(r * cho_solve(cf, r.T).T, axis=1)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return -0.5 * (q + logdet + state.dim * np.log(2.0 * np.pi))


def fisher_relative(s_model, state: GaussianState, samples) -> float:
    """``sum |s - grad log rho|^2 / sum |grad log rho|^2`` against the Gaussian score.

    ``s_model`` may be a score model or a precomputed ``(n, d)`` array.
    """
    x = np.atleast_2d(samples)
    ref = state.score(x)
    s = s_model if isinstance(s_model, np.ndarray) else s_model.score(x)
    den = np.sum(ref * ref)
    if den == 0:
        raise ZeroDivisionError("reference score vanishes on every sample")
    return float(np.sum((s - ref) ** 2) / den)


class OUOracle:
    """Dense-time provider of OU moments.

    Every state computed is cached; a query at ``t`` integrates forward from
    the latest cached state at or before ``t`` with RK4 steps of at most ``dt``.
    """

    def __init__(self, Gamma, b, D, state0: GaussianState, dt: float = 1e-4):
        self.Gamma = np.atleast_2d(np.asarray(Gamma, dtype=np.float64))
        self.D = np.atleast_2d(np.asarray(D, dtype=np.float64))
        self.b = _b_fn(b)
        self.state0 = state0
        self.dt = dt
        self._times = [float(state0.t)]
        self._states = [state0]

    @classmethod
    def from_system(cls, system, state0: GaussianState, dt: float = 1e-4) -> "OUOracle":
        meta = system.metadata
        if "Gamma" in meta:
            return cls(meta["Gamma"], meta["b"], system.diffusion(), state0, dt)
        if system.name == "harmonic":
            N, dbar = system.n_particles, system.ambient_dim
            trap = meta["trap"]
            Gamma = harmonic_gamma(N, dbar, meta["alpha"])
            return cls(Gamma, lambda t: np.tile(trap(t), N), system.diffusion(), state0, dt)
        raise ValueError(f"system {system.name!r} is not linear")

    def state_at(self, t: float) -> GaussianState:
        t = float(t)
        if t < self._times[0]:
            raise ValueError("query precedes the initial state")
        i = bisect.bisect_right(self._times, t) - 1
        start = self._states[i]
        if t == start.t:
            return start
        st = ou_moments_integrate(self.Gamma, self.b, self.D, start, [start.t, t], self.dt)[-1]
        st.t = t
        self._times.insert(i + 1, t)
        self._states.insert(i + 1, st)
        return st


def write_trajectory_csv(path, states: list[GaussianState]) -> None:
    """CSV with columns t, m_i..., C_ij... (upper triangle), entropy."""
    d = states[0].dim
    iu = np.triu_indices(d)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"m_{i}" for i in range(d)]
                   + [f"C_{i}_{j}" for i, j in zip(*iu)] + ["entropy"])
        for st in states:
            w.writerow([repr(float(st.t))] + [repr(float(v)) for v in st.mean]
                       + [repr(float(v)) for v in st.cov[iu]] + [repr(gaussian_entropy(st))])
