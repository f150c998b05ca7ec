"""Row-fused numba kernels for scalar-output swish MLPs.

These are the hot paths of potential-based scores: every particle and every
ordered particle pair is one row. Working row by row keeps all activations
in small scratch buffers instead of allocating ``(rows, hidden)`` temporaries.
The numpy routines in ``numcore`` are the reference these are tested against.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# error_model="numpy" drops the zero-division guard so loops vectorize
_JIT = dict(cache=True, fastmath=True, error_model="numpy", boundscheck=False)


@njit(inline="always", **_JIT)
def _sigmoid(z):
    # exp(-z) by a Taylor polynomial on z/128 then seven squarings; plain
    # arithmetic vectorizes where a libm call would not. Relative error ~1e-14.
    x = min(max(-z, -40.0), 40.0) * 0.0078125
    p = 1.0 / 6227020800.0
    p = p * x + 1.0 / 479001600.0
    p = p * x + 1.0 / 39916800.0
    p = p * x + 1.0 / 3628800.0
    p = p * x + 1.0 / 362880.0
    p = p * x + 1.0 / 40320.0
    p = p * x + 1.0 / 5040.0
    p = p * x + 1.0 / 720.0
    p = p * x + 1.0 / 120.0
    p = p * x + 1.0 / 24.0
    p = p * x + 1.0 / 6.0
    p = p * x + 0.5
    p = p * x + 1.0
    p = p * x + 1.0
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    return 1.0 / (1.0 + p)


def layout(sizes):
    """Offsets of each layer's weight and bias inside the flat theta."""
    sizes = np.asarray(sizes, dtype=np.int64)
    L = sizes.size - 1
    w_off = np.zeros(L, dtype=np.int64)
    b_off = np.zeros(L, dtype=np.int64)
    k = 0
    for l in range(L):
        w_off[l] = k
        k += sizes[l + 1] * sizes[l]
        b_off[l] = k
        k += sizes[l + 1]
    # activation offsets: layer l output stored at a_off[l]
    a_off = np.zeros(L + 1, dtype=np.int64)
    for l in range(L):
        a_off[l + 1] = a_off[l] + sizes[l]
    return sizes, w_off, b_off, a_off, int(a_off[L] + sizes[L])


@njit(**_JIT)
def _forward_row(theta, sizes, w_off, b_off, a_off, x, h, z, sig):
    L = sizes.size - 1
    for k in range(sizes[0]):
        h[k] = x[k]
    for l in range(L):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        hi = a_off[l]
        ho = a_off[l + 1]
        for o in range(n_out):
            acc = theta[b_off[l] + o]
            base = w_off[l] + o * n_in
            for i in range(n_in):
                acc += theta[base + i] * h[hi + i]
            z[ho + o] = acc
            if l < L - 1:
                s = _sigmoid(acc)
                sig[ho + o] = s
                h[ho + o] = acc * s
            else:
                h[ho + o] = acc


@njit(**_JIT)
def value_and_input_grad(theta, sizes, w_off, b_off, a_off, tot, X):
    M = X.shape[0]
    L = sizes.size - 1
    U = np.empty(M)
    G = np.empty((M, sizes[0]))
    h = np.empty(tot)
    z = np.empty(tot)
    sig = np.empty(tot)
    hb = np.empty(tot)
    for r in range(M):
        _forward_row(theta, sizes, w_off, b_off, a_off, X[r], h, z, sig)
        U[r] = h[a_off[L]]
        # reverse with unit adjoint on the scalar output
        hb[a_off[L]] = 1.0
        for l in range(L - 1, -1, -1):
            n_in = sizes[l]
            n_out = sizes[l + 1]
            hi = a_off[l]
            ho = a_off[l + 1]
            for i in range(n_in):
                hb[hi + i] = 0.0
            for o in range(n_out):
                zb = hb[ho + o]
                if l < L - 1:
                    s = sig[ho + o]
                    zb *= s * (1.0 + z[ho + o] * (1.0 - s))
                base = w_off[l] + o * n_in
                for i in range(n_in):
                    hb[hi + i] += theta[base + i] * zb
        for i in range(sizes[0]):
            G[r, i] = hb[i]
    return U, G


@njit(**_JIT)
def jvp_param_grad(theta, sizes, w_off, b_off, a_off, tot, X, V, c):
    """Gradient in theta of ``sum_r c[r] * (grad_x U(X[r]) . V[r])``."""
    M = X.shape[0]
    L = sizes.size - 1
    grad = np.zeros(theta.size)
    h = np.empty(tot)
    z = np.empty(tot)
    sig = np.empty(tot)
    hd = np.empty(tot)
    zd = np.empty(tot)
    hb = np.empty(tot)
    hdb = np.empty(tot)
    for r in range(M):
        _forward_row(theta, sizes, w_off, b_off, a_off, X[r], h, z, sig)
        for k in range(sizes[0]):
            hd[k] = V[r, k]
        # tangent pass
        for l in range(L):
            n_in = sizes[l]
            n_out = sizes[l + 1]
            hi = a_off[l]
            ho = a_off[l + 1]
            for o in range(n_out):
                acc = 0.0
                base = w_off[l] + o * n_in
                for i in range(n_in):
                    acc += theta[base + i] * hd[hi + i]
                zd[ho + o] = acc
                if l < L - 1:
                    s = sig[ho + o]
                    hd[ho + o] = s * (1.0 + z[ho + o] * (1.0 - s)) * acc
                else:
                    hd[ho + o] = acc
        # reverse: adjoint c on the output tangent, none on the output value
        cr = c[r]
        hb[a_off[L]] = 0.0
        hdb[a_off[L]] = cr
        for l in range(L - 1, -1, -1):
            n_in = sizes[l]
            n_out = sizes[l + 1]
            hi = a_off[l]
            ho = a_off[l + 1]
            for i in range(n_in):
                hb[hi + i] = 0.0
                hdb[hi + i] = 0.0
            for o in range(n_out):
                if l < L - 1:
                    s = sig[ho + o]
                    zz = z[ho + o]
                    d1 = s * (1.0 + zz * (1.0 - s))
                    d2 = s * (1.0 - s) * (2.0 + zz * (1.0 - 2.0 * s))
                    zb = hb[ho + o] * d1 + hdb[ho + o] * d2 * zd[ho + o]
                    zdb = hdb[ho + o] * d1
                else:
                    zb = hb[ho + o]
                    zdb = hdb[ho + o]
                grad[b_off[l] + o] += zb
                base = w_off[l] + o * n_in
                for i in range(n_in):
                    w = theta[base + i]
                    grad[base + i] += zb * h[hi + i] + zdb * hd[hi + i]
                    hb[hi + i] += w * zb
                    hdb[hi + i] += w * zdb
    return grad


# Single hidden layer, the common case for pair potentials. Weights are passed
# transposed, W1T of shape (in, H), so every inner loop runs over hidden units.


@njit(**_JIT)
def value_and_input_grad_1h(W1T, b1, w2, b2, X):
    M, n_in = X.shape
    H = b1.size
    U = np.empty(M)
    G = np.empty((M, n_in))
    z = np.empty(H)
    g = np.empty(H)
    for r in range(M):
        for o in range(H):
            z[o] = b1[o]
        for i in range(n_in):
            xi = X[r, i]
            for o in range(H):
                z[o] += W1T[i, o] * xi
        u = b2
        for o in range(H):
            zz = z[o]
            s = _sigmoid(zz)
            u += w2[o] * zz * s
            g[o] = w2[o] * s * (1.0 + zz * (1.0 - s))
        U[r] = u
        for i in range(n_in):
            acc = 0.0
            for o in range(H):
                acc += W1T[i, o] * g[o]
            G[r, i] = acc
    return U, G


@njit(**_JIT)
def jvp_param_grad_1h(W1T, b1, w2, X, V, c):
    """Returns (dW1T, db1, dw2) for ``sum_r c[r] * grad U(X[r]) . V[r]``."""
    M, n_in = X.shape
    H = b1.size
    dW1T = np.zeros((n_in, H))
    db1 = np.zeros(H)
    dw2 = np.zeros(H)
    z = np.empty(H)
    zd = np.empty(H)
    a = np.empty(H)
    e = np.empty(H)
    for r in range(M):
        for o in range(H):
            z[o] = b1[o]
            zd[o] = 0.0
        for i in range(n_in):
            xi = X[r, i]
            vi = V[r, i]
            for o in range(H):
                z[o] += W1T[i, o] * xi
                zd[o] += W1T[i, o] * vi
        cr = c[r]
        for o in range(H):
            zz = z[o]
            s = _sigmoid(zz)
            d1 = s * (1.0 + zz * (1.0 - s))
            d2 = s * (1.0 - s) * (2.0 + zz * (1.0 - 2.0 * s))
            dw2[o] += cr * d1 * zd[o]
            a[o] = cr * w2[o] * d2 * zd[o]
            e[o] = cr * w2[o] * d1
            db1[o] += a[o]
        for i in range(n_in):
            xi = X[r, i]
            vi = V[r, i]
            for o in range(H):
                dW1T[i, o] += a[o] * xi + e[o] * vi
    return dW1T, db1, dw2
