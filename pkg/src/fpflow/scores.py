"""Score models ``s(x) ~ grad log rho_t(x)``.

Every model exposes the same small surface used by the losses and the engine:

* ``score(x)`` for a batch ``(n, d)``, returning ``(n, d)``;
* ``param_grad(x, adjoint)``, the gradient of ``sum(adjoint * score(x))``
  with respect to the flat parameter vector ``theta``;
* a settable ``theta`` and ``n_params`` (zero for analytic models).

Time dependence enters only through ``theta``, which the engine warm-starts
from one step to the next.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .numcore import (AdamState, MlpParams, adam_init, adam_step, init_mlp, mlp_forward,
                      mlp_grad, scalar_jvp_param_grad, scalar_value_and_input_grad)

__all__ = [
    "PotentialScore",
    "DirectScore",
    "GaussianScore",
    "score_eval",
    "score_param_grad",
    "fit_initial_score",
    "relative_score_error",
]


class PotentialScore:
    """Permutation-symmetric potential ``U = sum_i U1(x_i) + (1/N) sum_{i!=j} U2(x_i, x_j)``.

    The score is ``-grad U``, so equivariance under particle permutations is
    exact by construction. ``backend`` picks the fused numba kernels
    (default) or the plain numpy reference path.
    """

    kind = "potential"

    def __init__(self, u1: MlpParams, u2: MlpParams, n_particles: int,
                 ambient_dim: int, symmetric_pair: bool = False, backend: str = "numba"):
        self.backend = backend
        if u1.sizes[0] != ambient_dim or u1.sizes[-1] != 1:
            raise ValueError("U1 must map R^dbar -> R")
        if u2.sizes[0] != 2 * ambient_dim or u2.sizes[-1] != 1:
            raise ValueError("U2 must map R^(2 dbar) -> R")
        self.u1 = u1
        self.u2 = u2
        self.N = int(n_particles)
        self.dbar = int(ambient_dim)
        self.symmetric_pair = symmetric_pair
        ii, jj = np.nonzero(~np.eye(self.N, dtype=bool))
        self._I, self._J = ii, jj
        # scatter matrices from ordered pairs back to particles
        self._SI = np.zeros((self.N, ii.size))
        self._SI[ii, np.arange(ii.size)] = 1.0
        self._SJ = np.zeros((self.N, jj.size))
        self._SJ[jj, np.arange(jj.size)] = 1.0

    @classmethod
    def create(cls, n_particles, ambient_dim, hidden=(100,), rng=None, symmetric_pair=False):
        rng = np.random.default_rng(rng)
        u1 = init_mlp((ambient_dim, *hidden, 1), rng)
        u2 = init_mlp((2 * ambient_dim, *hidden, 1), rng)
        return cls(u1, u2, n_particles, ambient_dim, symmetric_pair)

    @property
    def dim(self) -> int:
        return self.N * self.dbar

    @property
    def n_params(self) -> int:
        return self.u1.n_params + self.u2.n_params

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.u1.theta, self.u2.theta])

    @theta.setter
    def theta(self, value):
        value = np.asarray(value, dtype=np.float64)
        k = self.u1.n_params
        self.u1.theta = value[:k].copy()
        self.u2.theta = value[k:].copy()

    def descriptor(self) -> dict:
        return {"type": self.kind, "N": self.N, "dbar": self.dbar,
                "u1_sizes": list(self.u1.sizes), "u2_sizes": list(self.u2.sizes),
                "symmetric_pair": self.symmetric_pair}

    def nets(self) -> dict[str, MlpParams]:
        return {"u1": self.u1, "u2": self.u2}

    def copy(self) -> "PotentialScore":
        return PotentialScore(self.u1.copy(), self.u2.copy(), self.N, self.dbar,
                              self.symmetric_pair, self.backend)

    def _split(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.dim:
            raise ValueError(f"score input has dim {x.shape[-1]}, model expects {self.dim}")
        return x.reshape(x.shape[0], self.N, self.dbar)

    def _pairs(self, p):
        return np.concatenate([p[:, self._I], p[:, self._J]], axis=-1)

    def _swap(self, q):
        return np.concatenate([q[..., self.dbar:], q[..., :self.dbar]], axis=-1)

    def potential(self, x) -> np.ndarray:
        p = self._split(x)
        n = p.shape[0]
        u = mlp_forward(self.u1, p.reshape(-1, self.dbar)).reshape(n, self.N).sum(axis=1)
        q = self._pairs(p).reshape(-1, 2 * self.dbar)
        u2 = mlp_forward(self.u2, q)
        if self.symmetric_pair:
            u2 = 0.5 * (u2 + mlp_forward(self.u2, self._swap(q)))
        return u + u2.reshape(n, -1).sum(axis=1) / self.N

    def grad_potential(self, x) -> np.ndarray:
        p = self._split(x)
        n = p.shape[0]
        _, g1 = scalar_value_and_input_grad(self.u1, p.reshape(-1, self.dbar), self.backend)
        q = self._pairs(p)
        P = q.shape[1]
        qf = q.reshape(-1, 2 * self.dbar)
        _, g2 = scalar_value_and_input_grad(self.u2, qf, self.backend)
        if self.symmetric_pair:
            _, g2s = scalar_value_and_input_grad(self.u2, self._swap(qf), self.backend)
            g2 = 0.5 * (g2 + self._swap(g2s))
        g2 = g2.reshape(n, P, 2 * self.dbar)
        grad = g1.reshape(n, self.N, self.dbar)
        grad = grad + (np.einsum("ip,npk->nik", self._SI, g2[..., :self.dbar])
                       + np.einsum("ip,npk->nik", self._SJ, g2[..., self.dbar:])) / self.N
        return grad.reshape(n, self.dim)

    def score(self, x) -> np.ndarray:
        return -self.grad_potential(x)

    def param_grad(self, x, adjoint) -> np.ndarray:
        """Gradient of ``sum(adjoint * score(x))`` in theta (mixed second derivative)."""
        p = self._split(x)
        n = p.shape[0]
        a = np.asarray(adjoint, dtype=np.float64).reshape(n, self.N, self.dbar)
        g1 = scalar_jvp_param_grad(self.u1, p.reshape(-1, self.dbar),
                                   a.reshape(-1, self.dbar), backend=self.backend)
        q = self._pairs(p).reshape(-1, 2 * self.dbar)
        aq = self._pairs(a).reshape(-1, 2 * self.dbar)
        g2 = scalar_jvp_param_grad(self.u2, q, aq, backend=self.backend)
        if self.symmetric_pair:
            g2s = scalar_jvp_param_grad(self.u2, self._swap(q), self._swap(aq),
                                        backend=self.backend)
            g2 = 0.5 * (g2 + g2s)
        return -np.concatenate([g1, g2 / self.N])


class DirectScore:
    """A network that outputs score components directly.

    ``input_index`` selects the state coordinates fed to the net and
    ``output_index`` the coordinates it scores; the remaining score entries
    are zero (e.g. the swimmer scores only the noisy velocity coordinate).
    With ``antisymmetric`` set the output is ``(f(z) - f(-z)) / 2``.
    """

    kind = "direct"

    def __init__(self, net: MlpParams, dim: int, input_index=None, output_index=None,
                 antisymmetric: bool = False):
        self.net = net
        self._dim = int(dim)
        self.input_index = np.arange(dim) if input_index is None else np.asarray(input_index)
        self.output_index = np.arange(dim) if output_index is None else np.asarray(output_index)
        if net.sizes[0] != self.input_index.size or net.sizes[-1] != self.output_index.size:
            raise ValueError("network sizes do not match the index maps")
        self.antisymmetric = antisymmetric

    @classmethod
    def create(cls, dim, hidden=(32, 32, 32), rng=None, input_index=None, output_index=None,
               antisymmetric=False):
        rng = np.random.default_rng(rng)
        n_in = dim if input_index is None else len(input_index)
        n_out = dim if output_index is None else len(output_index)
        return cls(init_mlp((n_in, *hidden, n_out), rng), dim, input_index, output_index,
                   antisymmetric)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def n_params(self) -> int:
        return self.net.n_params

    @property
    def theta(self) -> np.ndarray:
        return self.net.theta.copy()

    @theta.setter
    def theta(self, value):
        self.net.theta = np.asarray(value, dtype=np.float64).copy()

    def descriptor(self) -> dict:
        return {"type": self.kind, "dim": self._dim, "sizes": list(self.net.sizes),
                "input_index": self.input_index.tolist(),
                "output_index": self.output_index.tolist(),
                "antisymmetric": self.antisymmetric}

    def nets(self) -> dict[str, MlpParams]:
        return {"net": self.net}

    def copy(self) -> "DirectScore":
        return DirectScore(self.net.copy(), self._dim, self.input_index, self.output_index,
                           self.antisymmetric)

    def _inputs(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self._dim:
            raise ValueError(f"score input has dim {x.shape[-1]}, model expects {self._dim}")
        return x[:, self.input_index]

    def score(self, x) -> np.ndarray:
        z = self._inputs(x)
        f = mlp_forward(self.net, z)
        if self.antisymmetric:
            f = 0.5 * (f - mlp_forward(self.net, -z))
        out = np.zeros((z.shape[0], self._dim))
        out[:, self.output_index] = f
        return out

    def param_grad(self, x, adjoint) -> np.ndarray:
        z = self._inputs(x)
        a = np.asarray(adjoint, dtype=np.float64).reshape(z.shape[0], self._dim)
        a = a[:, self.output_index]
        g, _ = mlp_grad(self.net, z, a)
        if self.antisymmetric:
            gm, _ = mlp_grad(self.net, -z, a)
            g = 0.5 * (g - gm)
        return g


class GaussianScore:
    """Analytic score ``-C^{-1}(x - m)`` of ``N(m, C)``; has no trainable parameters."""

    kind = "gaussian"
    n_params = 0

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match the mean")
        try:
            self._cho = cho_factor(self.cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("covariance is not positive definite") from exc

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def theta(self) -> np.ndarray:
        return np.zeros(0)

    @theta.setter
    def theta(self, value):
        if np.size(value):
            raise ValueError("GaussianScore has no parameters")

    @property
    def precision(self) -> np.ndarray:
        return cho_solve(self._cho, np.eye(self.dim))

    def descriptor(self) -> dict:
        return {"type": self.kind, "dim": self.dim}

    def nets(self) -> dict:
        return {}

    def copy(self) -> "GaussianScore":
        return GaussianScore(self.mean, self.cov)

    def score(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != self.dim:
            raise ValueError(f"score input has dim {x.shape[-1]}, model expects {self.dim}")
        return -cho_solve(self._cho, (x - self.mean).T).T

    def param_grad(self, x, adjoint) -> np.ndarray:
        return np.zeros(0)


def score_eval(model, x) -> np.ndarray:
    return model.score(x)


def score_param_grad(model, x, adjoint) -> np.ndarray:
    g = model.param_grad(x, adjoint)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite score parameter gradient")
    return g


def relative_score_error(s: np.ndarray, target: np.ndarray) -> float:
    """``sum |s - target|^2 / sum |target|^2`` over a batch."""
    den = np.sum(target * target)
    if den == 0:
        raise ZeroDivisionError("reference score vanishes on every sample")
    return float(np.sum((s - target) ** 2) / den)


def fit_initial_score(model, target_score, samples, tol: float = 1e-4, lr: float = 1e-4,
                      max_iter: int = 20000, adam: AdamState | None = None,
                      batch_size: int | None = None, rng=None):
    """Fit ``model`` to an analytic score by minimising the relative squared error.

    ``target_score`` is a callable ``x -> grad log rho_0(x)``. Runs full-batch
    Adam (or minibatch if ``batch_size`` is set, with the stopping test on
    the full set) until the relative loss drops below ``tol``. Not reaching
    ``tol`` is reported through the returned info, not raised.

    Returns ``(model, info)`` with ``info = {"loss", "iterations", "converged", "adam"}``.
    """
    samples = np.atleast_2d(samples)
    target = target_score(samples)
    den = np.sum(target * target)
    loss = relative_score_error(model.score(samples), target)
    state = adam if adam is not None else adam_init(model.n_params, lr=lr)
    it = 0
    rng = np.random.default_rng(rng)
    n = samples.shape[0]
    while loss >= tol and it < max_iter and model.n_params:
        if batch_size is None or batch_size >= n:
            xb, tb, db = samples, target, den
        else:
            idx = rng.choice(n, batch_size, replace=False)
            xb, tb = samples[idx], target[idx]
            db = np.sum(tb * tb)
        s = model.score(xb)
        g = model.param_grad(xb, 2.0 * (s - tb) / db)
        state, model.theta = adam_step(state, model.theta, g)
        it += 1
        if batch_size is None or batch_size >= n:
            # loss of the pre-update parameters; recomputed exactly on exit
            loss = float(np.sum((s - tb) ** 2) / db)
        elif it % 10 == 0:
            loss = relative_score_error(model.score(samples), target)
    loss = relative_score_error(model.score(samples), target)
    return model, {"loss": loss, "iterations": it, "converged": loss < tol, "adam": state}
