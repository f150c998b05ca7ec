"""Score-matching objectives and divergence estimators.

All losses take frozen noise ``xi`` of shape ``(n, k)`` where ``k`` is the
noise rank (columns of ``sigma``), so a loss and its gradient are evaluated
on the same draw. ``alpha`` is a noise scale in state space: points are
perturbed by ``alpha * sigma xi / |sigma|`` with ``|sigma|`` the largest
singular value of ``sigma``. With ``sigma = I`` this is the textbook
``x + alpha xi``.

Every ``*_and_grad`` function returns ``(loss, grad)`` with ``grad`` the
gradient in the model's flat parameter vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LossConfig",
    "draw_noise",
    "explicit_loss_and_grad",
    "denoising_loss_and_grad",
    "loss_and_grad",
    "divergence_doubling",
    "exact_divergence_fd",
]


@dataclass(frozen=True)
class LossConfig:
    kind: str = "denoising"
    alpha: float = 0.05
    doubling: bool = True
    divergence: str = "doubling"  # explicit loss only: doubling | exact
    stream: int = 1

    def __post_init__(self):
        if self.kind not in ("denoising", "explicit"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.divergence not in ("doubling", "exact"):
            raise ValueError(f"unknown divergence mode {self.divergence!r}")
        if not self.alpha > 0:
            raise ValueError("noise scale alpha must be positive")


def draw_noise(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.standard_normal((n, k))


def _sigma(sigma, d):
    if sigma is None:
        return np.eye(d)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    if sigma.shape[0] != d:
        raise ValueError(f"sigma has {sigma.shape[0]} rows, samples have dim {d}")
    return sigma


def _rel_alpha(alpha, sigma):
    return alpha / np.linalg.norm(sigma, 2)


def _finite(loss, grad):
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise FloatingPointError("non-finite loss or gradient")
    return float(loss), grad


def denoising_loss_and_grad(model, samples, alpha: float, xi, sigma=None, doubling: bool = True):
    """Denoising score matching ``mean |sigma^T s(x + a sigma xi) + xi / a|^2``.

    With ``doubling`` the antithetic partner ``-xi`` is added and the two
    terms averaged. The loss includes the constant ``|xi|^2 / a^2`` so that
    an exact pointwise minimiser scores zero.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = x.shape
    sig = _sigma(sigma, d)
    a = _rel_alpha(alpha, sig)
    xi = np.asarray(xi, dtype=np.float64).reshape(n, sig.shape[1])
    shift = a * xi @ sig.T
    if doubling:
        y = np.concatenate([x + shift, x - shift])
        target = np.concatenate([xi, -xi]) / a
        w = 0.5 / n
    else:
        y = x + shift
        target = xi / a
        w = 1.0 / n
    r = model.score(y) @ sig + target
    loss = w * np.sum(r * r)
    grad = model.param_grad(y, 2.0 * w * (r @ sig.T))
    return _finite(loss, grad)


def divergence_doubling(model, x, alpha: float, xi, sigma=None) -> np.ndarray:
    """Per-sample antithetic estimate of ``tr(D grad s)`` (``div s`` when sigma is None).

    ``(2a)^-1 [s(x + a sigma xi) - s(x - a sigma xi)] . sigma xi``; its
    mean over ``xi`` is exact for linear ``s`` and has bias ``O(a^2)``
    otherwise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    sig = _sigma(sigma, d)
    a = _rel_alpha(alpha, sig)
    xi = np.asarray(xi, dtype=np.float64).reshape(n, sig.shape[1])
    u = xi @ sig.T
    s = model.score(np.concatenate([x + a * u, x - a * u]))
    return np.sum((s[:n] - s[n:]) * u, axis=1) / (2.0 * a)


def exact_divergence_fd(model, x, h: float = 1e-4, diffusion=None) -> np.ndarray:
    """Central-difference ``sum_k [D (s(x + h e_k) - s(x - h e_k))]_k / 2h``, per sample."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    if d > 10:
        raise ValueError("finite-difference divergence is limited to d <= 10")
    D = np.eye(d) if diffusion is None else np.asarray(diffusion, dtype=np.float64)
    pts = np.concatenate([x + h * e for e in np.eye(d)] + [x - h * e for e in np.eye(d)])
    s = model.score(pts).reshape(2, d, n, d)
    ds = (s[0] - s[1]) / (2.0 * h)  # (k, n, d): derivative along e_k
    return np.einsum("kni,ki->n", ds, D)


def explicit_loss_and_grad(model, samples, diffusion, alpha: float = 1e-3, xi=None,
                           sigma=None, div_diffusion=None, divergence: str = "doubling",
                           h: float = 1e-4):
    """Sequential objective ``mean |s|_D^2 + 2 div(D s)``.

    ``div(D s) = (div D) . s + tr(D grad s)``; the trace is estimated with the
    antithetic estimator on ``xi`` (``divergence="doubling"``) or by central
    differences (``divergence="exact"``, small ``d`` only).
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = x.shape
    D = np.asarray(diffusion, dtype=np.float64)
    s = model.score(x)
    Ds = s @ D
    loss = np.sum(s * Ds) / n
    adj = 2.0 * Ds / n
    if div_diffusion is not None:
        dd = np.asarray(div_diffusion, dtype=np.float64).reshape(n, d)
        loss += 2.0 * np.sum(dd * s) / n
        adj = adj + 2.0 * dd / n
    if divergence == "doubling":
        sig = _sigma(sigma, d)
        a = _rel_alpha(alpha, sig)
        xi = np.asarray(xi, dtype=np.float64).reshape(n, sig.shape[1])
        u = xi @ sig.T
        y = np.concatenate([x + a * u, x - a * u])
        sy = model.score(y)
        loss += np.sum((sy[:n] - sy[n:]) * u) / (a * n)
        pts = np.concatenate([x, y])
        adjs = np.concatenate([adj, u / (a * n), -u / (a * n)])
    elif divergence == "exact":
        if d > 10:
            raise ValueError("exact divergence is limited to d <= 10")
        loss += 2.0 * np.sum(exact_divergence_fd(model, x, h, D)) / n
        eye = np.eye(d)
        plus = [x + h * e for e in eye]
        minus = [x - h * e for e in eye]
        # d/ds(x + h e_k) of [D s]_k / h n is row k of D
        dirs = [np.broadcast_to(D[k] / (h * n), (n, d)) for k in range(d)]
        pts = np.concatenate([x] + plus + minus)
        adjs = np.concatenate([adj] + dirs + [-q for q in dirs])
    else:
        raise ValueError(f"unknown divergence mode {divergence!r}")
    grad = model.param_grad(pts, adjs)
    return _finite(loss, grad)


def loss_and_grad(model, samples, config: LossConfig, system, t: float, rng):
    """Dispatch on ``config`` with a fresh noise draw from ``rng``."""
    x = np.atleast_2d(samples)
    sigma = system.sigma_at(t)
    xi = draw_noise(rng, x.shape[0], sigma.shape[1])
    if config.kind == "denoising":
        return denoising_loss_and_grad(model, x, config.alpha, xi, sigma, config.doubling)
    div_d = None
    if system.div_diffusion_fn is not None:
        div_d = system.div_diffusion(t, x)
    return explicit_loss_and_grad(model, x, system.diffusion(t), config.alpha, xi, sigma,
                                  div_d, config.divergence)
