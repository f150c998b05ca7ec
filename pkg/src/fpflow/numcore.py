"""Dense MLPs with hand-written reverse mode, and a flat-vector Adam.

Parameters of a network live in a single flat float64 vector so the
optimizer, checkpoints and finite-difference checks all work on one array.
Layer ``l`` stores a weight matrix of shape ``(out, in)`` followed by a bias
of shape ``(out,)``. Hidden layers use swish, the last layer is linear.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import truncnorm

__all__ = [
    "MlpParams",
    "AdamState",
    "init_mlp",
    "mlp_forward",
    "mlp_grad",
    "mlp_jvp",
    "mlp_jvp_grad",
    "scalar_value_and_input_grad",
    "scalar_jvp_param_grad",
    "adam_init",
    "adam_step",
    "swish",
    "params_to_json",
    "params_from_json",
    "save_params",
    "load_params",
]


def swish(z):
    return z * expit(z)


def _swish_derivs(z):
    """Return swish(z), swish'(z), swish''(z)."""
    sig = expit(z)
    h = z * sig
    d1 = sig * (1.0 + z * (1.0 - sig))
    d2 = sig * (1.0 - sig) * (2.0 + z * (1.0 - 2.0 * sig))
    return h, d1, d2


@dataclass
class MlpParams:
    sizes: tuple[int, ...]
    theta: np.ndarray
    activation: str = "swish"

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.n_params,):
            raise ValueError(
                f"theta has shape {self.theta.shape}, expected ({self.n_params},)"
            )

    @staticmethod
    def count(sizes: Sequence[int]) -> int:
        return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self) -> int:
        return self.count(self.sizes)

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def layers(self, theta: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into ``theta`` (defaults to this network's own)."""
        theta = self.theta if theta is None else theta
        out = []
        k = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = theta[k:k + n_out * n_in].reshape(n_out, n_in)
            k += n_out * n_in
            b = theta[k:k + n_out]
            k += n_out
            out.append((W, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.sizes, self.theta.copy(), self.activation)


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, trunc: float = 2.0) -> MlpParams:
    """Truncated-normal weights with variance 1/fan_in, zero biases.

    ``trunc`` is the truncation bound in standard deviations. The samples are
    rescaled so the post-truncation variance is exactly 1/fan_in.
    """
    sizes = tuple(int(s) for s in sizes)
    theta = np.zeros(MlpParams.count(sizes))
    p = MlpParams(sizes, theta)
    # variance of a standard normal truncated to [-trunc, trunc]
    tvar = truncnorm.var(-trunc, trunc)
    for W, _ in p.layers():
        fan_in = W.shape[1]
        draw = truncnorm.rvs(-trunc, trunc, size=W.shape, random_state=rng)
        W[...] = draw / np.sqrt(tvar * fan_in)
    return p


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(
            f"input has shape {x.shape}, network expects (batch, {params.input_dim})"
        )
    return x


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a batch ``x`` of shape ``(M, in)``.

    A 1-D ``x`` is treated as a single sample and a 1-D result is returned.
    """
    single = np.ndim(x) == 1
    h = _check_input(params, x)
    layers = params.layers()
    for W, b in layers[:-1]:
        h = swish(h @ W.T + b)
    W, b = layers[-1]
    y = h @ W.T + b
    return y[0] if single else y


def mlp_grad(params: MlpParams, x: np.ndarray, adjoint: np.ndarray):
    """Reverse-mode gradients of ``sum(adjoint * mlp_forward(params, x))``.

    Returns ``(theta_grad, x_grad)`` where ``theta_grad`` is flat like
    ``params.theta`` and ``x_grad`` has the shape of the batch.
    """
    h = _check_input(params, x)
    adjoint = np.asarray(adjoint, dtype=np.float64).reshape(h.shape[0], params.output_dim)
    layers = params.layers()
    hs = [h]
    d1s = []
    for W, b in layers[:-1]:
        z = h @ W.T + b
        h, d1, _ = _swish_derivs(z)
        hs.append(h)
        d1s.append(d1)

    grad = np.empty_like(params.theta)
    glayers = params.layers(grad)
    zbar = adjoint
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        gW, gb = glayers[li]
        gW[...] = zbar.T @ hs[li]
        gb[...] = zbar.sum(axis=0)
        hbar = zbar @ W
        if li > 0:
            zbar = hbar * d1s[li - 1]
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite parameter gradient")
    return grad, hbar


def mlp_jvp(params: MlpParams, x: np.ndarray, v: np.ndarray):
    """Forward-mode directional derivative: returns ``(y, J_x y · v)``."""
    h = _check_input(params, x)
    hd = np.asarray(v, dtype=np.float64).reshape(h.shape)
    layers = params.layers()
    for W, b in layers[:-1]:
        z = h @ W.T + b
        zd = hd @ W.T
        h, d1, _ = _swish_derivs(z)
        hd = d1 * zd
    W, b = layers[-1]
    return h @ W.T + b, hd @ W.T


def mlp_jvp_grad(params: MlpParams, x, v, adj_tangent, adj_value=None):
    """Parameter gradient of ``sum(adj_tangent * ydot) + sum(adj_value * y)``.

    ``(y, ydot) = mlp_jvp(params, x, v)``. This is reverse mode through the
    tangent-propagating forward pass, i.e. a mixed second derivative. It is
    what the parameter gradient of a potential-based score ``-grad_x U``
    needs, since ``<a, grad_x U(x)>`` is the JVP of ``U`` along ``a``.

    Returns ``(theta_grad, x_grad, v_grad)``.
    """
    h = _check_input(params, x)
    M = h.shape[0]
    hd = np.asarray(v, dtype=np.float64).reshape(h.shape)
    layers = params.layers()
    hs, hds, zds, d1s, d2s = [h], [hd], [], [], []
    for W, b in layers[:-1]:
        z = h @ W.T + b
        zd = hd @ W.T
        h, d1, d2 = _swish_derivs(z)
        hd = d1 * zd
        hs.append(h)
        hds.append(hd)
        zds.append(zd)
        d1s.append(d1)
        d2s.append(d2)

    out = params.output_dim
    zdbar = np.asarray(adj_tangent, dtype=np.float64).reshape(M, out)
    if adj_value is None:
        zbar = None
    else:
        zbar = np.asarray(adj_value, dtype=np.float64).reshape(M, out)

    grad = np.empty_like(params.theta)
    glayers = params.layers(grad)
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        gW, gb = glayers[li]
        gW[...] = zdbar.T @ hds[li]
        if zbar is None:
            gb[...] = 0.0
            hbar = None
        else:
            gW += zbar.T @ hs[li]
            gb[...] = zbar.sum(axis=0)
            hbar = zbar @ W
        hdbar = zdbar @ W
        if li > 0:
            d1, d2, zd = d1s[li - 1], d2s[li - 1], zds[li - 1]
            # hd = d1(z) * zd, h = swish(z)
            zbar = hdbar * d2 * zd
            if hbar is not None:
                zbar = zbar + hbar * d1
            zdbar = hdbar * d1
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite parameter gradient")
    xbar = hbar if hbar is not None else np.zeros_like(h)
    return grad, xbar, hdbar


def _layout(params: MlpParams):
    from . import _kernels
    key = params.sizes
    cache = _LAYOUTS.get(key)
    if cache is None:
        cache = _LAYOUTS[key] = _kernels.layout(key)
    return cache


_LAYOUTS: dict = {}


def scalar_value_and_input_grad(params: MlpParams, x: np.ndarray, backend: str = "numba"):
    """Value and input gradient of a scalar-output network, row by row.

    Same result as ``mlp_forward`` plus ``mlp_grad`` with unit adjoints, but
    without ``(rows, hidden)`` temporaries when ``backend="numba"``.
    """
    x = _check_input(params, x)
    if params.output_dim != 1:
        raise ValueError("scalar-output network required")
    if backend == "numpy":
        y = mlp_forward(params, x)[:, 0]
        _, g = mlp_grad(params, x, np.ones((x.shape[0], 1)))
        return y, g
    from . import _kernels
    x = np.ascontiguousarray(x)
    if len(params.sizes) == 3:
        (W1, b1), (W2, b2) = params.layers()
        return _kernels.value_and_input_grad_1h(np.ascontiguousarray(W1.T), b1, W2[0],
                                                float(b2[0]), x)
    sizes, w_off, b_off, a_off, tot = _layout(params)
    return _kernels.value_and_input_grad(params.theta, sizes, w_off, b_off, a_off, tot, x)


def scalar_jvp_param_grad(params: MlpParams, x, v, weights=None, backend: str = "numba"):
    """Parameter gradient of ``sum_r weights[r] * <grad_x U(x_r), v_r>``."""
    x = _check_input(params, x)
    v = np.ascontiguousarray(np.asarray(v, dtype=np.float64).reshape(x.shape))
    c = np.ones(x.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if backend == "numpy":
        g, _, _ = mlp_jvp_grad(params, x, v, c[:, None])
        return g
    from . import _kernels
    x = np.ascontiguousarray(x)
    if len(params.sizes) == 3:
        (W1, b1), (W2, _) = params.layers()
        dW1T, db1, dw2 = _kernels.jvp_param_grad_1h(np.ascontiguousarray(W1.T), b1, W2[0],
                                                    x, v, c)
        g = np.concatenate([dW1T.T.ravel(), db1, dw2, [0.0]])
    else:
        sizes, w_off, b_off, a_off, tot = _layout(params)
        g = _kernels.jvp_param_grad(params.theta, sizes, w_off, b_off, a_off, tot, x, v, c)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite parameter gradient")
    return g


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n_params: int, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n_params), np.zeros(n_params), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray):
    """One bias-corrected Adam update. Returns ``(new_state, new_params)``."""
    grads = np.asarray(grads, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("Adam state, parameters and gradients must share a shape")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient passed to Adam")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = m / (1.0 - state.beta1 ** t)
    vhat = v / (1.0 - state.beta2 ** t)
    new = params - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps), new


# -- checkpoints -------------------------------------------------------------

def params_to_json(params: MlpParams, name: str = "net") -> list[dict]:
    """Flat list of named arrays: one entry per weight and bias."""
    entries = []
    for li, (W, b) in enumerate(params.layers()):
        for tag, arr in (("weight", W), ("bias", b)):
            entries.append({
                "net": name,
                "layer": li,
                "tag": tag,
                "shape": list(arr.shape),
                # float repr is the shortest string that round-trips exactly
                "data": [float(a) for a in arr.ravel()],
            })
    return entries


def params_from_json(entries: list[dict], name: str = "net") -> MlpParams:
    mine = [e for e in entries if e.get("net", "net") == name]
    if not mine:
        raise KeyError(f"no arrays for network {name!r} in checkpoint")
    mine.sort(key=lambda e: (e["layer"], 0 if e["tag"] == "weight" else 1))
    sizes = [mine[0]["shape"][1]]
    chunks = []
    for e in mine:
        arr = np.asarray(e["data"], dtype=np.float64)
        if arr.size != int(np.prod(e["shape"])):
            raise ValueError(f"layer {e['layer']} {e['tag']}: data/shape mismatch")
        if e["tag"] == "weight":
            if e["shape"][1] != sizes[-1]:
                raise ValueError("adjacent layer dimensions do not chain")
            sizes.append(e["shape"][0])
        chunks.append(arr)
    return MlpParams(tuple(sizes), np.concatenate(chunks))


def save_params(path, nets: dict[str, MlpParams], meta: dict | None = None) -> None:
    arrays = []
    for name, p in nets.items():
        arrays.extend(params_to_json(p, name))
    doc = {"meta": meta or {}, "arrays": arrays}
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> tuple[dict[str, MlpParams], dict]:
    doc = json.loads(Path(path).read_text())
    names = []
    for e in doc["arrays"]:
        if e["net"] not in names:
            names.append(e["net"])
    return {n: params_from_json(doc["arrays"], n) for n in names}, doc.get("meta", {})
