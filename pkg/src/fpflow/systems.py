"""Drift/diffusion specifications for the benchmark particle systems.

All evaluators are batched: ``x`` has shape ``(n, d)`` and the drift returns
``(n, d)``. Diffusion is represented by its factor ``sigma`` of shape
``(d, k)`` (constant) with ``D = sigma @ sigma.T``; ``k`` is the rank of the
noise, so rank-deficient diffusion (the swimmer) has a rectangular factor.
The SDE convention is ``dx = (b + div D) dt + sqrt(2) sigma dW``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "TrapPath",
    "SystemSpec",
    "harmonic_system",
    "soft_sphere_system",
    "swimmer_system",
    "ou_system",
    "harmonic_gamma",
    "make_system",
]


@dataclass(frozen=True)
class TrapPath:
    """Trap centre ``beta_t = a (cos(pi w t), sin(pi w t))``, or ``(cos, 0)`` if linear."""

    amplitude: float = 2.0
    omega: float = 1.0
    mode: str = "circular"
    ambient_dim: int = 2

    def __post_init__(self):
        if self.mode not in ("circular", "linear"):
            raise ValueError(f"unknown trap mode {self.mode!r}")

    def __call__(self, t: float) -> np.ndarray:
        out = np.zeros(self.ambient_dim)
        ph = np.pi * self.omega * t
        out[0] = self.amplitude * np.cos(ph)
        if self.ambient_dim > 1 and self.mode == "circular":
            out[1] = self.amplitude * np.sin(ph)
        return out


@dataclass
class SystemSpec:
    name: str
    dim: int
    drift_fn: Callable[[float, np.ndarray], np.ndarray]
    sigma: np.ndarray
    n_particles: int = 1
    ambient_dim: int | None = None
    div_diffusion_fn: Callable[[float, np.ndarray], np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if self.sigma.shape[0] != self.dim:
            raise ValueError(f"sigma has {self.sigma.shape[0]} rows, system dim is {self.dim}")
        if self.ambient_dim is None:
            self.ambient_dim = self.dim // self.n_particles
        if self.n_particles * self.ambient_dim != self.dim:
            raise ValueError("dim must equal n_particles * ambient_dim")
        self._D = self.sigma @ self.sigma.T

    @property
    def noise_rank(self) -> int:
        return self.sigma.shape[1]

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.drift_fn(t, np.asarray(x, dtype=np.float64))

    def diffusion(self, t: float = 0.0, x: np.ndarray | None = None) -> np.ndarray:
        return self._D

    def sigma_at(self, t: float = 0.0, x: np.ndarray | None = None) -> np.ndarray:
        return self.sigma

    def div_diffusion(self, t: float, x: np.ndarray) -> np.ndarray:
        # constant diffusion throughout the catalog: the correction is zero
        if self.div_diffusion_fn is None:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        return self.div_diffusion_fn(t, x)

    @property
    def noise_scale(self) -> float:
        """Square root of the largest eigenvalue of D (noise std per unit time)."""
        return float(np.sqrt(np.linalg.eigvalsh(self._D)[-1]))

    def velocity(self, t: float, x: np.ndarray, score: np.ndarray) -> np.ndarray:
        """Probability-flow velocity ``b_t(x) - D_t(x) s``."""
        return self.drift(t, x) - score @ self._D.T


def _particles(x: np.ndarray, N: int) -> np.ndarray:
    return x.reshape(x.shape[0], N, -1)


def harmonic_system(N: int, alpha: float, D: float, trap: TrapPath | None = None) -> SystemSpec:
    """Particles pulled to a moving trap, repelling through the centre of mass."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"repulsion alpha must lie in (0, 1), got {alpha}")
    if D <= 0 or N < 1:
        raise ValueError("need D > 0 and N >= 1")
    trap = trap or TrapPath()
    dbar = trap.ambient_dim

    def drift(t, x):
        p = _particles(np.atleast_2d(x), N)
        beta = trap(t)
        out = (beta - p) + alpha * (p - p.mean(axis=1, keepdims=True))
        return out.reshape(np.shape(np.atleast_2d(x)))

    d = N * dbar
    return SystemSpec(
        name="harmonic", dim=d, drift_fn=drift, sigma=np.sqrt(D) * np.eye(d),
        n_particles=N, ambient_dim=dbar,
        metadata={"N": N, "alpha": alpha, "D": D, "trap": trap},
    )


def soft_sphere_system(N: int, A: float, r: float, gamma_trap: float, D: float,
                       trap: TrapPath | None = None) -> SystemSpec:
    """Soft spheres (Gaussian-core repulsion) in a quartic moving trap."""
    if A <= 0 or r <= 0 or D <= 0:
        raise ValueError("soft spheres need A > 0, r > 0 and D > 0")
    trap = trap or TrapPath()
    dbar = trap.ambient_dim
    R = np.sqrt(gamma_trap * N) * r
    B = D / R**2

    def drift(t, x):
        x2 = np.atleast_2d(x)
        p = _particles(x2, N)
        beta = trap(t)
        dev = p - beta
        out = -4.0 * B * dev * np.sum(dev * dev, axis=-1, keepdims=True)
        diff = p[:, :, None, :] - p[:, None, :, :]
        w = np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * r**2))
        out = out + (A / (N * r**2)) * np.einsum("nij,nijk->nik", w, diff)
        return out.reshape(x2.shape)

    d = N * dbar
    return SystemSpec(
        name="soft_sphere", dim=d, drift_fn=drift, sigma=np.sqrt(D) * np.eye(d),
        n_particles=N, ambient_dim=dbar,
        metadata={"N": N, "A": A, "r": r, "gamma_trap": gamma_trap, "D": D,
                  "B": B, "R": R, "trap": trap},
    )


def swimmer_system(gamma: float, D: float) -> SystemSpec:
    """Active swimmer ``dx = (-x^3 + v) dt``, ``dv = -gamma v dt + sqrt(2 gamma D) dW``."""
    if gamma <= 0 or D <= 0:
        raise ValueError("swimmer needs gamma > 0 and D > 0")

    def drift(t, x):
        x2 = np.atleast_2d(x)
        pos, vel = x2[:, 0], x2[:, 1]
        return np.stack([-pos**3 + vel, -gamma * vel], axis=1)

    sigma = np.array([[0.0], [np.sqrt(gamma * D)]])
    return SystemSpec(
        name="swimmer", dim=2, drift_fn=drift, sigma=sigma,
        metadata={"gamma": gamma, "D": D},
    )


def ou_system(Gamma, b, sigma) -> SystemSpec:
    """Linear drift ``-Gamma (x - b_t)`` with constant factor ``sigma``.

    ``b`` may be a vector or a callable ``t -> vector``.
    """
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=np.float64))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    d = Gamma.shape[0]
    if Gamma.shape != (d, d) or sigma.shape[0] != d:
        raise ValueError("Gamma must be d x d and sigma must have d rows")
    if callable(b):
        b_fn = b
    else:
        b_arr = np.asarray(b, dtype=np.float64).reshape(d)
        b_fn = lambda t: b_arr  # noqa: E731
    if np.any(np.linalg.eigvals(Gamma).real <= 0):
        warnings.warn("Gamma has eigenvalues with nonpositive real part; no stationary state",
                      RuntimeWarning, stacklevel=2)

    def drift(t, x):
        return -(np.atleast_2d(x) - b_fn(t)) @ Gamma.T

    D = sigma @ sigma.T
    meta = {"Gamma": Gamma, "b": b_fn, "detailed_balance": _is_detailed_balance(Gamma, D)}
    return SystemSpec(name="ou", dim=d, drift_fn=drift, sigma=sigma, metadata=meta)


def _is_detailed_balance(Gamma: np.ndarray, D: np.ndarray, tol: float = 1e-10) -> bool:
    # Gamma = D A with A symmetric positive definite
    try:
        A = np.linalg.solve(D, Gamma)
    except np.linalg.LinAlgError:
        return False
    if not np.allclose(A, A.T, atol=tol * max(1.0, np.abs(A).max())):
        return False
    return bool(np.all(np.linalg.eigvalsh(0.5 * (A + A.T)) > 0))


def harmonic_gamma(N: int, dbar: int, alpha: float) -> np.ndarray:
    """Block drift matrix of the harmonic system written as an OU process.

    ``Gamma_ij = (1 - alpha) delta_ij I + (alpha / N) I``; the OU centre is
    ``1_N (x) beta_t``.
    """
    return np.kron((1.0 - alpha) * np.eye(N) + (alpha / N) * np.ones((N, N)), np.eye(dbar))


def make_system(name: str, params: dict) -> SystemSpec:
    """Build a catalog system from a name and a parameter table."""
    p = dict(params)
    trap = None
    if name in ("harmonic", "soft_sphere"):
        trap = TrapPath(float(p.pop("a", 2.0)), float(p.pop("omega", 1.0)),
                        str(p.pop("trap", "circular")), int(p.pop("dbar", 2)))
    if name == "harmonic":
        sys = harmonic_system(int(p.pop("N")), float(p.pop("alpha")), float(p.pop("D")), trap)
    elif name == "soft_sphere":
        sys = soft_sphere_system(int(p.pop("N")), float(p.pop("A")), float(p.pop("r")),
                                 float(p.pop("gamma_trap")), float(p.pop("D")), trap)
    elif name == "swimmer":
        sys = swimmer_system(float(p.pop("gamma")), float(p.pop("D")))
    elif name == "ou":
        d = int(p.pop("dim", 1))
        Gamma = float(p.pop("Gamma", 1.0)) * np.eye(d)
        b = float(p.pop("b", 0.0)) * np.ones(d)
        Dval = float(p.pop("D", 1.0))
        if Dval < 0:
            raise ValueError("ou system needs D >= 0")
        sigma = np.sqrt(Dval) * np.eye(d)
        sys = ou_system(Gamma, b, sigma)
    else:
        raise KeyError(f"unknown system {name!r}")
    if p:
        raise KeyError(f"unknown parameters for system {name!r}: {sorted(p)}")
    return sys
