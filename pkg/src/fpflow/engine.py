"""Time stepping: sequential score-based transport and its reference integrators.

The central loop alternates two moves at each node ``t_k``:

1. fit the score model on the current ensemble (a few Adam steps, warm
   started from the previous node);
2. move the ensemble along ``v_t = b_t - D_t s_t`` to ``t_{k+1}``.

Entropy, KL-bound and Fisher diagnostics are recorded at every node after
the fit, so the row for ``t_k`` always describes the score used to leave it.
Randomness is keyed by ``(seed, stream, step, iteration)`` so runs are
reproducible and independent of evaluation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diagnostics import (DiagnosticsRecord, KLBound, ScoreHistory, entropy_rate_samples,
                          kl_bound_increment)
from .losses import LossConfig, loss_and_grad
from .numcore import AdamState, adam_init, adam_step
from .oracle import fisher_relative

__all__ = [
    "Ensemble",
    "StepPlan",
    "RunResult",
    "TrainingDiverged",
    "STREAMS",
    "stream_rng",
    "budget_samples",
    "optimize_score",
    "sbtm_step",
    "run_sequential_sbtm",
    "train_on_sde_baseline",
    "sde_euler_maruyama",
    "noise_free_run",
    "g_rhs_linear",
    "g_rhs_numeric",
    "propagate_G",
    "resample_langevin",
]

# independent random streams; the integer is mixed into every seed key
STREAMS = {"init": 0, "loss": 1, "batch": 2, "sde": 3, "langevin": 4, "samples": 5, "net": 6}


def stream_rng(seed: int, stream: str | int, *keys: int) -> np.random.Generator:
    sid = STREAMS[stream] if isinstance(stream, str) else int(stream)
    return np.random.default_rng([int(seed), sid, *[int(k) for k in keys]])


def budget_samples(N: int, dbar: int, total: float = 1e5) -> int:
    """Sample count holding ``n N dbar`` fixed."""
    return max(1, int(round(total / (N * dbar))))


@dataclass
class Ensemble:
    x: np.ndarray
    t: float = 0.0
    G: np.ndarray | None = None
    entropy: float = math.nan
    kl_total: float = 0.0
    div_integral: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        if not np.all(np.isfinite(self.x)):
            raise FloatingPointError("ensemble contains non-finite samples")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "Ensemble":
        return Ensemble(self.x.copy(), self.t, None if self.G is None else self.G.copy(),
                        self.entropy, self.kl_total,
                        None if self.div_integral is None else self.div_integral.copy())


@dataclass(frozen=True)
class StepPlan:
    dt: float = 1e-3
    T: float = 1.0
    integrator: str = "euler"
    n_opt_steps: int = 25
    gtol: float = 0.1
    lr: float = 1e-4
    warm_start: bool = True
    reset_adam: bool = False
    batch_size: int | None = None

    def __post_init__(self):
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if not self.dt > 0 or self.T < 0:
            raise ValueError("need dt > 0 and T >= 0")

    def timesteps(self) -> np.ndarray:
        if self.T == 0:
            return np.zeros(0)
        K = max(1, int(round(self.T / self.dt)))
        return np.full(K, self.T / K)

    def times(self) -> np.ndarray:
        K = self.timesteps().size
        return np.linspace(0.0, self.T, K + 1) if K else np.zeros(1)


class TrainingDiverged(RuntimeError):
    """Raised when the score fit produces non-finite values; carries the last good state."""

    def __init__(self, msg, ensemble=None, theta=None, records=None):
        super().__init__(msg)
        self.ensemble = ensemble
        self.theta = theta
        self.records = records


@dataclass
class RunResult:
    records: list[DiagnosticsRecord]
    ensemble: Ensemble
    model: object
    history: ScoreHistory | None = None
    adam: AdamState | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------- score fitting


def optimize_score(model, x, system, t: float, loss_cfg: LossConfig, plan: StepPlan,
                   adam: AdamState, seed: int, step: int):
    """Up to ``n_opt_steps`` Adam steps; stops early once ``|grad|_2 < gtol``.

    Returns ``(adam, last_loss, n_updates)``.
    """
    n = x.shape[0]
    loss = math.nan
    updates = 0
    for j in range(plan.n_opt_steps):
        if plan.batch_size is not None and plan.batch_size < n:
            idx = stream_rng(seed, "batch", step, j).choice(n, plan.batch_size, replace=False)
            xb = x[np.sort(idx)]
        else:
            xb = x
        loss, g = loss_and_grad(model, xb, loss_cfg, system, t,
                                stream_rng(seed, loss_cfg.stream, step, j))
        if np.linalg.norm(g) < plan.gtol:
            break
        adam, model.theta = adam_step(adam, model.theta, g)
        updates += 1
    return adam, loss, updates


# ---------------------------------------------------------------- G dynamics


def g_rhs_linear(system, oracle):
    """``dG/dt = (Gamma^T - C^-1 D) G`` with the oracle's moments (OU only)."""
    Gamma = np.atleast_2d(oracle.Gamma)
    D = system.diffusion()

    def rhs(t, x, G):
        P = oracle.state_at(t).precision()
        return G @ (Gamma.T - P @ D).T
    return rhs


def g_rhs_numeric(system, h: float = 1e-3):
    """``dG/dt = -[grad v]^T G - grad div v`` by central differences (``d <= 10``)."""
    if system.dim > 10:
        raise ValueError("numeric G propagation is limited to d <= 10")

    def rhs(t, x, G, vfn):
        n, d = x.shape
        eye = np.eye(d)

        def div(y):
            pts = np.concatenate([y + h * e for e in eye] + [y - h * e for e in eye])
            v = vfn(t, pts).reshape(2, d, n, d)
            return np.einsum("knk->n", v[0] - v[1]) / (2.0 * h)

        pts = np.concatenate([x + h * e for e in eye] + [x - h * e for e in eye])
        v = vfn(t, pts).reshape(2, d, n, d)
        J = (v[0] - v[1]) / (2.0 * h)  # J[k, n, i] = d v_i / d x_k
        gdiv = np.stack([(div(x + h * e) - div(x - h * e)) / (2.0 * h) for e in eye], axis=1)
        return -np.einsum("kni,ni->nk", J, G) - gdiv
    rhs.needs_velocity = True
    return rhs


def _call_g(g_rhs, t, x, G, vfn):
    if getattr(g_rhs, "needs_velocity", False):
        return g_rhs(t, x, G, vfn)
    return g_rhs(t, x, G)


# ---------------------------------------------------------------- transport


def _transport(system, score_fn, t, h, x, integrator, s0=None, G=None, g_rhs=None,
               track_div=False):
    """One step of the probability flow.

    ``score_fn(tt, y)`` gives the score at stage time ``tt``. Returns
    ``(x_new, G_new, mid_rate, div_inc)`` where ``mid_rate`` is the entropy
    rate at the step midpoint (RK4 only) and ``div_inc`` the per-sample
    increment of the integral of ``div v`` (when ``track_div``).
    """
    def vfn(tt, y):
        return system.velocity(tt, y, score_fn(tt, y))

    def div(tt, y):
        n, d = y.shape
        eye = np.eye(d)
        hh = 1e-4
        pts = np.concatenate([y + hh * e for e in eye] + [y - hh * e for e in eye])
        v = vfn(tt, pts).reshape(2, d, n, d)
        return np.einsum("knk->n", v[0] - v[1]) / (2.0 * hh)

    has_g = G is not None and g_rhs is not None
    if integrator == "euler":
        s = score_fn(t, x) if s0 is None else s0
        v = system.velocity(t, x, s)
        Gn = G + h * _call_g(g_rhs, t, x, G, vfn) if has_g else G
        dinc = h * div(t, x) if track_div else None
        return x + h * v, Gn, math.nan, dinc
    t2 = t + 0.5 * h
    s1 = score_fn(t, x) if s0 is None else s0
    k1 = system.velocity(t, x, s1)
    y2 = x + 0.5 * h * k1
    s2 = score_fn(t2, y2)
    k2 = system.velocity(t2, y2, s2)
    y3 = x + 0.5 * h * k2
    s3 = score_fn(t2, y3)
    k3 = system.velocity(t2, y3, s3)
    y4 = x + h * k3
    k4 = vfn(t + h, y4)
    xn = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    mid = 0.5 * (entropy_rate_samples(s2, k2) + entropy_rate_samples(s3, k3))
    Gn = G
    if has_g:
        g1 = _call_g(g_rhs, t, x, G, vfn)
        g2 = _call_g(g_rhs, t2, y2, G + 0.5 * h * g1, vfn)
        g3 = _call_g(g_rhs, t2, y3, G + 0.5 * h * g2, vfn)
        g4 = _call_g(g_rhs, t + h, y4, G + h * g3, vfn)
        Gn = G + (h / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
    dinc = None
    if track_div:
        dinc = (h / 6.0) * (div(t, x) + 2.0 * div(t2, y2) + 2.0 * div(t2, y3) + div(t + h, y4))
    return xn, Gn, mid, dinc


def propagate_G(ensemble: Ensemble, system, score_fn, dt: float, mode: str = "numeric",
                oracle=None, integrator: str = "rk4") -> Ensemble:
    """Advance samples and their score-along-trajectories ``G`` by one step."""
    if ensemble.G is None:
        raise ValueError("ensemble carries no G; initialise it with grad log rho_0")
    if mode == "linear":
        if oracle is None:
            raise ValueError("linear G propagation needs an OU oracle")
        g_rhs = g_rhs_linear(system, oracle)
    elif mode == "numeric":
        g_rhs = g_rhs_numeric(system)
    else:
        raise ValueError(f"unknown G mode {mode!r}")
    xn, Gn, _, _ = _transport(system, score_fn, ensemble.t, dt, ensemble.x, integrator,
                              G=ensemble.G, g_rhs=g_rhs)
    out = ensemble.copy()
    out.x, out.G, out.t = xn, Gn, ensemble.t + dt
    return out


# ---------------------------------------------------------------- SBTM


def _frozen_fn(model):
    return lambda tt, y: model.score(y)


def sbtm_step(ensemble: Ensemble, model, system, plan: StepPlan, loss_cfg: LossConfig,
              adam: AdamState, seed: int, step: int, dt: float, *, train: bool = True,
              train_x=None, score_fn=None, reference=None, g_rhs=None, oracle=None,
              sde_x=None, rate_prev=None, dt_prev=0.0, track_div=False):
    """Fit at ``ensemble.t``, record diagnostics, then transport by ``dt``.

    ``score_fn(t, x)`` replaces the learned model when given (exact-score
    runs). ``train_x`` substitutes the training set (train-on-SDE
    baseline). ``reference`` selects the KL-bound reference: ``"G"`` for the
    ensemble's propagated G, ``"oracle"`` for the oracle score, or None.
    Returns ``(ensemble, adam, record, rate)``.
    """
    t = ensemble.t
    x = ensemble.x
    loss, updates = math.nan, 0
    if score_fn is None:
        if train and model.n_params and plan.n_opt_steps > 0:
            if plan.reset_adam:
                adam = adam_init(model.n_params, lr=adam.lr)
            xt = x if train_x is None else train_x
            try:
                adam, loss, updates = optimize_score(model, xt, system, t, loss_cfg, plan,
                                                     adam, seed, step)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"score fit diverged at t={t:.6g}: {exc}",
                                       ensemble=ensemble) from exc
        sfn = _frozen_fn(model)
    else:
        sfn = score_fn
    s = sfn(t, x)
    if not np.all(np.isfinite(s)):
        raise TrainingDiverged(f"non-finite score at t={t:.6g}", ensemble=ensemble)
    D = system.diffusion(t)
    v = system.velocity(t, x, s)
    rate = entropy_rate_samples(s, v)

    ens = ensemble.copy()
    if plan.integrator == "euler" and rate_prev is not None:
        # trapezoid over the step that led here
        ens.entropy += 0.5 * dt_prev * (rate_prev + rate)
    rec = DiagnosticsRecord(t=t, H=ens.entropy, dHdt=rate, loss=loss, opt_steps=updates)

    ref = None
    if reference == "G":
        ref = ens.G
    elif reference == "oracle" and oracle is not None:
        ref = oracle.state_at(t).score(x)
    rec.kl_inc = kl_bound_increment(s, ref, D, dt)
    bound = KLBound()
    bound.total = ens.kl_total
    rec.kl_total = ens.kl_total = bound.add(rec.kl_inc)
    if oracle is not None:
        st = oracle.state_at(t)
        rec.fisher_train = fisher_relative(s, st, x)
        if sde_x is not None:
            rec.fisher_sde = fisher_relative(sfn(t, sde_x), st, sde_x)
    rec.cov_trace = float(np.trace(np.atleast_2d(np.cov(x, rowvar=False)))) if ens.n > 1 \
        else math.nan

    if dt > 0:
        xn, Gn, mid, dinc = _transport(system, sfn, t, dt, x, plan.integrator, s0=s,
                                       G=ens.G, g_rhs=g_rhs, track_div=track_div)
        if plan.integrator == "rk4" and not math.isnan(ens.entropy):
            ens.entropy += dt * mid
        ens.x, ens.G, ens.t = xn, Gn, t + dt
        if track_div and dinc is not None:
            ens.div_integral = (np.zeros(ens.n) if ens.div_integral is None
                                else ens.div_integral) + dinc
        if not np.all(np.isfinite(ens.x)):
            raise TrainingDiverged(f"transport produced non-finite samples at t={t:.6g}",
                                   ensemble=ensemble)
    return ens, adam, rec, rate


def run_sequential_sbtm(system, model, x0, plan: StepPlan, loss_cfg: LossConfig | None = None,
                        seed: int = 0, *, h0: float = math.nan, score_fn=None, oracle=None,
                        reference=None, G0=None, g_mode=None, sde_compare: bool = False,
                        train_on_sde: bool = False, keep_history: bool = False,
                        track_div: bool = False, adam: AdamState | None = None,
                        on_step: Callable | None = None) -> RunResult:
    """Full sequential loop over the plan's nodes ``t_0 = 0, ..., t_K = T``.

    ``model`` should already be fit to the initial score. Training is skipped
    at ``t_0`` for that reason and performed at every later node, including
    ``T`` so the last row has a fitted entropy rate. ``h0`` is the initial
    entropy (NaN disables the entropy trace). ``G0`` with ``g_mode`` in
    ``{"linear", "numeric"}`` propagates the score along trajectories.
    ``sde_compare`` co-simulates an Euler-Maruyama ensemble from ``x0`` for
    the SDE-sample Fisher divergence; ``train_on_sde`` additionally trains
    on it (the comparison baseline). ``on_step(k, ensemble, model, record)``
    is called after every node.
    """
    loss_cfg = loss_cfg or LossConfig()
    ens = Ensemble(np.array(x0, dtype=np.float64), 0.0,
                   None if G0 is None else np.array(G0, dtype=np.float64), h0, 0.0)
    if track_div:
        ens.div_integral = np.zeros(ens.n)
    g_rhs = None
    if G0 is not None:
        if g_mode == "linear":
            g_rhs = g_rhs_linear(system, oracle)
        elif g_mode == "numeric":
            g_rhs = g_rhs_numeric(system)
        else:
            raise ValueError("G0 given without a G mode (linear | numeric)")
    if model is not None and adam is None:
        adam = adam_init(model.n_params, lr=plan.lr)
    theta0 = None if model is None else model.theta.copy()
    history = ScoreHistory(model) if keep_history and model is not None else None
    need_sde = sde_compare or train_on_sde
    y = ens.x.copy() if need_sde else None
    dts = plan.timesteps()
    nodes = plan.times()
    records: list[DiagnosticsRecord] = []
    rate_prev, dt_prev = None, 0.0
    for k in range(dts.size + 1):
        dt = float(dts[k]) if k < dts.size else 0.0
        if model is not None and not plan.warm_start and k > 0:
            model.theta = theta0
        try:
            ens_new, adam, rec, rate = sbtm_step(
                ens, model, system, plan, loss_cfg, adam, seed, k, dt,
                train=k > 0, train_x=y if train_on_sde else None, score_fn=score_fn,
                reference=reference, g_rhs=g_rhs, oracle=oracle, sde_x=y if need_sde else None,
                rate_prev=rate_prev, dt_prev=dt_prev, track_div=track_div)
        except TrainingDiverged as exc:
            exc.records = records
            exc.theta = None if model is None else model.theta.copy()
            raise
        if history is not None:
            history.append(ens.t, model.theta)
        records.append(rec)
        if on_step is not None:
            on_step(k, ens, model, rec)
        if need_sde and dt > 0:
            y = _em_step(system, ens.t, y, dt, stream_rng(seed, "sde", k))
        ens = ens_new
        ens.t = float(nodes[min(k + 1, dts.size)])
        rate_prev, dt_prev = rate, dt
    return RunResult(records, ens, model, history, adam)


def train_on_sde_baseline(system, model, x0, plan: StepPlan, loss_cfg: LossConfig | None = None,
                          seed: int = 0, **kw) -> RunResult:
    """Same loop as ``run_sequential_sbtm`` with the score fit on SDE samples.

    The probability-flow ensemble is still the one transported and
    diagnosed; only the training set changes.
    """
    return run_sequential_sbtm(system, model, x0, plan, loss_cfg, seed, train_on_sde=True, **kw)


# ---------------------------------------------------------------- reference integrators


def _em_step(system, t, x, dt, rng):
    sig = system.sigma_at(t, x)
    xi = rng.standard_normal((x.shape[0], sig.shape[1]))
    drift = system.drift(t, x)
    if system.div_diffusion_fn is not None:
        drift = drift + system.div_diffusion(t, x)
    return x + dt * drift + np.sqrt(2.0 * dt) * (xi @ sig.T)


def _snapshots(step_fn, x0, plan: StepPlan, record_every: int | None):
    dts = plan.timesteps()
    nodes = plan.times()
    x = np.array(np.atleast_2d(x0), dtype=np.float64)
    out = [Ensemble(x.copy(), 0.0)]
    for k, dt in enumerate(dts):
        x = step_fn(k, float(nodes[k]), x, float(dt))
        last = k == dts.size - 1
        if last or (record_every and (k + 1) % record_every == 0):
            out.append(Ensemble(x.copy(), float(nodes[k + 1])))
    return out


def sde_euler_maruyama(system, samples, plan: StepPlan, seed: int = 0,
                       record_every: int | None = 1) -> list[Ensemble]:
    """``X += (b + div D) dt + sqrt(2 dt) sigma xi``; snapshots every ``record_every`` steps."""
    return _snapshots(lambda k, t, x, dt: _em_step(system, t, x, dt, stream_rng(seed, "sde", k)),
                      samples, plan, record_every)


def noise_free_run(system, samples, plan: StepPlan, record_every: int | None = 1
                   ) -> list[Ensemble]:
    """Deterministic integration of the drift alone (``D`` set to zero)."""
    def step(k, t, x, dt):
        if plan.integrator == "euler":
            return x + dt * system.drift(t, x)
        k1 = system.drift(t, x)
        k2 = system.drift(t + 0.5 * dt, x + 0.5 * dt * k1)
        k3 = system.drift(t + 0.5 * dt, x + 0.5 * dt * k2)
        k4 = system.drift(t + dt, x + dt * k3)
        return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return _snapshots(step, samples, plan, record_every)


def resample_langevin(model, x_init, n_steps: int, dtau: float, seed: int = 0) -> np.ndarray:
    """Langevin dynamics ``dX = s(X) dtau + sqrt(2) dW`` at frozen ``s``.

    With the factor ``sqrt(2)`` the density whose score is ``s`` is
    stationary.
    """
    x = np.array(np.atleast_2d(x_init), dtype=np.float64)
    for k in range(int(n_steps)):
        xi = stream_rng(seed, "langevin", k).standard_normal(x.shape)
        x = x + dtau * model.score(x) + np.sqrt(2.0 * dtau) * xi
    return x
