"""Diagnostics that need the transport map rather than samples alone.

Entropy and its rate come from line integrals along the probability flow;
pointwise densities come from integrating the flow backward to ``t = 0``
and applying the change of variables formula. The KL bound accumulator,
empirical moments and KDE grids round out what the engine reports.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiagnosticsRecord",
    "CSV_COLUMNS",
    "write_records_csv",
    "read_records_csv",
    "entropy_rate_samples",
    "entropy_trace",
    "entropy_rate",
    "ScoreHistory",
    "frozen_score",
    "velocity_divergence",
    "flow_map",
    "density_eval",
    "cubic_nullcline_distance",
    "probability_current",
    "loop_integral",
    "kl_bound_increment",
    "KLBound",
    "empirical_moments",
    "kde_grid",
    "kde_points",
    "GridSpec",
    "write_grid_csv",
    "read_grid_csv",
    "grid_l1",
]

CSV_COLUMNS = ("t", "H", "dH/dt", "kl_inc", "kl_total", "fisher_train", "fisher_sde",
               "cov_trace", "loss", "opt_steps")


@dataclass
class DiagnosticsRecord:
    """One row per time step. Quantities that were not computed are NaN."""

    t: float
    H: float = math.nan
    dHdt: float = math.nan
    kl_inc: float = math.nan
    kl_total: float = math.nan
    fisher_train: float = math.nan
    fisher_sde: float = math.nan
    cov_trace: float = math.nan
    loss: float = math.nan
    opt_steps: int = 0
    extras: dict = field(default_factory=dict)

    def row(self) -> list:
        return [self.t, self.H, self.dHdt, self.kl_inc, self.kl_total, self.fisher_train,
                self.fisher_sde, self.cov_trace, self.loss, self.opt_steps]

    def as_dict(self) -> dict:
        return asdict(self)


def write_records_csv(path, records: Sequence[DiagnosticsRecord], extra_columns=()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(CSV_COLUMNS) + list(extra_columns))
        for r in records:
            vals = r.row() + [r.extras.get(c, math.nan) for c in extra_columns]
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in vals])


def read_records_csv(path) -> list[DiagnosticsRecord]:
    names = [f.name for f in fields(DiagnosticsRecord)][:len(CSV_COLUMNS)]
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header[:len(CSV_COLUMNS)]) != CSV_COLUMNS:
            raise ValueError(f"unexpected diagnostics header {header[:len(CSV_COLUMNS)]}")
        extra = header[len(CSV_COLUMNS):]
        for row in rd:
            kw = {n: float(v) for n, v in zip(names, row)}
            kw["opt_steps"] = int(float(row[len(CSV_COLUMNS) - 1]))
            rec = DiagnosticsRecord(**kw)
            rec.extras = {c: float(v) for c, v in zip(extra, row[len(CSV_COLUMNS):])}
            out.append(rec)
    return out


# ---------------------------------------------------------------- entropy


def entropy_rate_samples(score: np.ndarray, velocity: np.ndarray) -> float:
    """``dH/dt = -mean(s . v)`` over the ensemble."""
    return float(-np.mean(np.sum(score * velocity, axis=1)))


def entropy_trace(h0: float, times, rates, integrator: str = "euler", mid_rates=None
                  ) -> np.ndarray:
    """Integrate entropy rates into ``H_t``.

    Euler runs use the trapezoid rule on the node rates; RK4 runs pass the
    per-step midpoint rates in ``mid_rates``.
    """
    times = np.asarray(times, dtype=np.float64)
    dt = np.diff(times)
    if integrator == "rk4":
        inc = dt * np.asarray(mid_rates, dtype=np.float64)[:dt.size]
    else:
        r = np.asarray(rates, dtype=np.float64)
        inc = 0.5 * dt * (r[:-1] + r[1:])
    return h0 + np.concatenate([[0.0], np.cumsum(inc)])


def entropy_rate(records: Sequence[DiagnosticsRecord], window: int = 1) -> np.ndarray:
    """Entropy rate series from records, optionally smoothed by a centred moving average."""
    r = np.array([rec.dHdt for rec in records], dtype=np.float64)
    if window <= 1:
        return r
    k = np.ones(window) / window
    pad = window // 2
    rp = np.pad(r, (pad, window - 1 - pad), mode="edge")
    return np.convolve(rp, k, mode="valid")


# ---------------------------------------------------------------- flow, density


class ScoreHistory:
    """Parameter snapshots of a learned score along a run.

    ``model_for_interval(t)`` returns the model that drove the transport
    over the step starting at the nearest node ``t_k <= t``.
    """

    def __init__(self, template, times=(), thetas=()):
        self.template = template.copy()
        self.times: list[float] = list(times)
        self.thetas: list[np.ndarray] = [np.asarray(th).copy() for th in thetas]

    def append(self, t: float, theta: np.ndarray) -> None:
        if self.times and t < self.times[-1]:
            raise ValueError("history times must be nondecreasing")
        self.times.append(float(t))
        self.thetas.append(np.asarray(theta, dtype=np.float64).copy())

    def index_for(self, t: float) -> int:
        if not self.times:
            raise ValueError("empty score history")
        k = int(np.searchsorted(np.asarray(self.times), t + 1e-9, side="right")) - 1
        return max(k, 0)

    def model_for_interval(self, t: float):
        self.template.theta = self.thetas[self.index_for(t)]
        return self.template

    def score_fn(self) -> Callable:
        return lambda t, x: self.model_for_interval(t).score(x)


def _fd_divergence(vfn, t, x, h):
    n, d = x.shape
    eye = np.eye(d)
    pts = np.concatenate([x + h * e for e in eye] + [x - h * e for e in eye])
    v = vfn(t, pts).reshape(2, d, n, d)
    return np.einsum("knk->n", (v[0] - v[1])) / (2.0 * h)


def velocity_divergence(vfn, t, x, method: str = "exact", h: float = 1e-4, n_draws: int = 16,
                        alpha: float = 1e-3, rng=None) -> np.ndarray:
    """``div v`` per point, by central differences or the antithetic estimator."""
    x = np.atleast_2d(x)
    if method == "exact":
        return _fd_divergence(vfn, t, x, h)
    rng = np.random.default_rng(rng)
    n, d = x.shape
    acc = np.zeros(n)
    for _ in range(n_draws):
        xi = rng.standard_normal((n, d))
        v = vfn(t, np.concatenate([x + alpha * xi, x - alpha * xi]))
        acc += np.sum((v[:n] - v[n:]) * xi, axis=1) / (2.0 * alpha)
    return acc / n_draws


def _interval_nodes(times, t0, t1, dt):
    """Integration nodes between t0 and t1 aligned with the run's step grid if given."""
    if times is not None:
        lo, hi = min(t0, t1), max(t0, t1)
        inner = [s for s in times if lo + 1e-12 < s < hi - 1e-12]
        nodes = [lo] + inner + [hi]
        # subdivide long gaps
        fine = [nodes[0]]
        for a, b in zip(nodes[:-1], nodes[1:]):
            m = max(1, int(np.ceil((b - a) / dt - 1e-9)))
            fine.extend(a + (b - a) * np.arange(1, m + 1) / m)
        nodes = np.array(fine)
    else:
        m = max(1, int(np.ceil(abs(t1 - t0) / dt - 1e-9)))
        nodes = np.linspace(min(t0, t1), max(t0, t1), m + 1)
    return nodes if t1 >= t0 else nodes[::-1]


def flow_map(system, score_fn, x, t0: float, t1: float, dt: float = 1e-3, times=None,
             with_divergence: bool = False, div_method: str = "exact", rng=None):
    """RK4 flow of ``dX/dt = b_t - D s_t`` from ``t0`` to ``t1`` (either direction).

    Each RK4 step over ``[t_a, t_b]`` evaluates the score with the model
    attached to the interval's lower end, so learned histories are used
    piecewise-constant in time just as during the forward run. With
    ``with_divergence`` the integral of ``div v`` along the path is returned too.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
    nodes = _interval_nodes(times, t0, t1, dt)
    acc = np.zeros(x.shape[0])
    rng = np.random.default_rng(rng)
    piecewise = _frozen(score_fn)
    for ta, tb in zip(nodes[:-1], nodes[1:]):
        lo = min(ta, tb)

        def v(tt, y, lo=lo):
            return system.velocity(tt, y, score_fn(lo if piecewise else tt, y))

        h = tb - ta
        if with_divergence:
            def dv(tt, y):
                return velocity_divergence(v, tt, y, div_method, rng=rng)
            k1, q1 = v(ta, x), dv(ta, x)
            y2 = x + 0.5 * h * k1
            k2, q2 = v(ta + 0.5 * h, y2), dv(ta + 0.5 * h, y2)
            y3 = x + 0.5 * h * k2
            k3, q3 = v(ta + 0.5 * h, y3), dv(ta + 0.5 * h, y3)
            y4 = x + h * k3
            k4, q4 = v(tb, y4), dv(tb, y4)
            acc += (h / 6.0) * (q1 + 2 * q2 + 2 * q3 + q4)
        else:
            k1 = v(ta, x)
            k2 = v(ta + 0.5 * h, x + 0.5 * h * k1)
            k3 = v(ta + 0.5 * h, x + 0.5 * h * k2)
            k4 = v(tb, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("flow left the representable range")
    if with_divergence:
        return x, acc
    return x


def _frozen(score_fn) -> bool:
    return getattr(score_fn, "piecewise", False)


def frozen_score(history: ScoreHistory) -> Callable:
    """Score callable that marks itself piecewise-constant over run intervals."""
    fn = history.score_fn()
    fn.piecewise = True
    return fn


def density_eval(system, score_fn, log_rho0, x, t: float, dt: float = 1e-3, times=None,
                 div_method: str = "exact", rng=None):
    """``rho_t(x) = rho_0(X_{t,0}(x)) exp(-int_0^t div v)`` by backward RK4.

    Returns ``(rho, log_rho)``. ``score_fn(t, x)`` is an analytic score or
    ``frozen_score(history)`` for a learned run; ``times`` aligns the
    backward steps with the run's step grid.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if t == 0:
        lr = log_rho0(x)
        return np.exp(lr), lr
    x0, div_int = flow_map(system, score_fn, x, t, 0.0, dt, times, with_divergence=True,
                           div_method=div_method, rng=rng)
    # backward accumulation carries the sign of the reversed time direction
    lr = log_rho0(x0) + div_int
    return np.exp(lr), lr


def probability_current(system, score_fn, x, t: float, rho=None, log_rho0=None,
                        dt: float = 1e-3, times=None, div_method: str = "exact"):
    """``j = v_t(x) rho_t(x)``.

    Density values may be supplied (e.g. from a KDE) when the backward flow
    is too stiff to integrate; otherwise they come from ``density_eval``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if rho is None:
        if log_rho0 is None:
            raise ValueError("need either rho or log_rho0")
        rho, _ = density_eval(system, score_fn, log_rho0, x, t, dt, times, div_method)
    v = system.velocity(t, x, score_fn(t, x))
    return v * np.asarray(rho, dtype=np.float64).reshape(-1, 1)


def loop_integral(field_fn: Callable, radius: float, n: int = 256, center=(0.0, 0.0)) -> float:
    """Counter-clockwise circulation of a planar field around a circle."""
    th = 2.0 * np.pi * np.arange(n) / n
    pts = np.stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)], axis=1)
    tang = np.stack([-np.sin(th), np.cos(th)], axis=1) * radius
    f = field_fn(pts)
    return float(np.sum(f * tang) * (2.0 * np.pi / n))


def cubic_nullcline_distance(x: np.ndarray) -> np.ndarray:
    """Euclidean distance from each ``(p, v)`` row to the curve ``v = p^3``.

    The foot point solves ``3 u^5 - 3 v u^2 + u - p = 0``; all real roots
    are tried through batched companion matrices.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p, v = x[:, 0], x[:, 1]
    n = p.size
    # monic quintic u^5 + 0 u^4 + 0 u^3 - v u^2 + u/3 - p/3
    comp = np.zeros((n, 5, 5))
    comp[:, 1:, :-1] = np.eye(4)
    comp[:, 0, :] = -np.stack([np.zeros(n), np.zeros(n), -v, np.full(n, 1.0 / 3.0), -p / 3.0],
                              axis=1)
    roots = np.linalg.eigvals(comp)
    u = roots.real
    d2 = (u - p[:, None]) ** 2 + (u ** 3 - v[:, None]) ** 2
    # complex roots are not foot points; the quintic always has at least one real root
    d2 = np.where(np.abs(roots.imag) < 1e-7 * (1.0 + np.abs(roots.real)), d2, np.inf)
    return np.sqrt(d2.min(axis=1))


# ---------------------------------------------------------------- KL bound


def kl_bound_increment(s, reference, D, dt: float) -> float:
    """``1/2 mean |s - ref|_D^2 dt``; NaN (unavailable) when ``reference`` is None."""
    if reference is None:
        return math.nan
    r = np.atleast_2d(s) - np.atleast_2d(reference)
    return float(0.5 * np.mean(np.sum(r * (r @ np.asarray(D).T), axis=1)) * dt)


class KLBound:
    """Running total of bound increments; stays NaN once any increment is unavailable."""

    def __init__(self):
        self.total = 0.0

    def add(self, inc: float) -> float:
        if math.isnan(inc):
            self.total = math.nan
        elif inc < 0:
            raise ValueError("KL bound increments are nonnegative")
        else:
            self.total += inc
        return self.total


# ---------------------------------------------------------------- moments, KDE


def empirical_moments(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] < 2:
        raise ValueError("need at least two samples for a covariance")
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


@dataclass(frozen=True)
class GridSpec:
    xmin: float
    xmax: float
    ymin: float
    ymax: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("empty grid")

    def axes(self):
        return np.linspace(self.xmin, self.xmax, self.nx), np.linspace(self.ymin, self.ymax, self.ny)

    def points(self) -> np.ndarray:
        gx, gy = self.axes()
        X, Y = np.meshgrid(gx, gy)
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def cell_area(self) -> float:
        hx = (self.xmax - self.xmin) / max(self.nx - 1, 1)
        hy = (self.ymax - self.ymin) / max(self.ny - 1, 1)
        return hx * hy


def scott_bandwidth(samples) -> np.ndarray:
    x = np.atleast_2d(samples)
    n, d = x.shape
    return x.std(axis=0, ddof=1) * n ** (-1.0 / (d + 4))


def _kde_bandwidth(x, bandwidth):
    if bandwidth is None:
        if x.shape[0] < 2:
            raise ValueError("Scott's rule needs at least two samples; pass a bandwidth")
        bw = scott_bandwidth(x)
    else:
        bw = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (x.shape[1],)).copy()
    if np.any(bw <= 0):
        raise ValueError("bandwidth must be positive")
    return bw


def kde_points(samples, points, bandwidth=None, coords=(0, 1)) -> np.ndarray:
    """The same product-Gaussian KDE evaluated at scattered 2-D ``points``."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))[:, list(coords)]
    bw = _kde_bandwidth(x, bandwidth)
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    z = (p[:, None, :] - x[None, :, :]) / bw
    k = np.exp(-0.5 * np.sum(z * z, axis=2)) / (2 * np.pi * bw[0] * bw[1])
    return k.mean(axis=1)


def kde_grid(samples, grid: GridSpec, bandwidth=None, coords=(0, 1), block: int = 2048
             ) -> np.ndarray:
    """Product-Gaussian KDE on a regular 2-D grid; returns an ``(ny, nx)`` array.

    ``bandwidth`` is a scalar or per-axis pair; Scott's rule when omitted.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))[:, list(coords)]
    n = x.shape[0]
    bw = _kde_bandwidth(x, bandwidth)
    gx, gy = grid.axes()
    # separable kernel: density = (1/n) sum_i Kx(gx - x_i) Ky(gy - y_i)
    out = np.zeros((grid.ny, grid.nx))
    for s in range(0, n, block):
        xb = x[s:s + block]
        kx = np.exp(-0.5 * ((gx[None, :] - xb[:, :1]) / bw[0]) ** 2) / (np.sqrt(2 * np.pi) * bw[0])
        ky = np.exp(-0.5 * ((gy[None, :] - xb[:, 1:]) / bw[1]) ** 2) / (np.sqrt(2 * np.pi) * bw[1])
        out += ky.T @ kx
    return out / n


def write_grid_csv(path, grid: GridSpec, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.shape != (grid.ny, grid.nx):
        raise ValueError("grid values do not match the grid spec")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"xmin={grid.xmin!r}", f"xmax={grid.xmax!r}", f"ymin={grid.ymin!r}",
                    f"ymax={grid.ymax!r}", f"nx={grid.nx}", f"ny={grid.ny}"])
        for row in values:
            w.writerow([repr(float(v)) for v in row])


def read_grid_csv(path) -> tuple[GridSpec, np.ndarray]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        head = dict(item.split("=", 1) for item in next(rd))
        grid = GridSpec(float(head["xmin"]), float(head["xmax"]), float(head["ymin"]),
                        float(head["ymax"]), int(head["nx"]), int(head["ny"]))
        vals = np.array([[float(v) for v in row] for row in rd])
    return grid, vals.reshape(grid.ny, grid.nx)


def grid_l1(a: np.ndarray, b: np.ndarray) -> float:
    """L1 distance between two grids after normalising each to unit sum."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.sum(np.abs(a / a.sum() - b / b.sum())))
