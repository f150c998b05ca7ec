"""Command line entry point: ``fpflow <subcommand> [--config FILE | --preset NAME] ...``.

Every run directory receives a ``manifest.json`` that starts out with
``"status": "incomplete"`` and is rewritten as ``"complete"`` only after all
outputs are in place, so an interrupted run is recognisable as such.
"""
from __future__ import annotations

import os

if "FPFLOW_NUM_THREADS" in os.environ:  # must precede numpy import to reach BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["FPFLOW_NUM_THREADS"])

import argparse
import json
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, build_config, config_to_text, parse_config, parse_text
from .diagnostics import (GridSpec, ScoreHistory, density_eval, entropy_rate, entropy_trace,
                          frozen_score, kde_grid, read_records_csv, write_grid_csv,
                          write_records_csv)
from .engine import (StepPlan, noise_free_run, run_sequential_sbtm, sde_euler_maruyama,
                     stream_rng, train_on_sde_baseline)
from .losses import LossConfig
from .numcore import load_params, save_params
from .oracle import (GaussianState, OUOracle, gaussian_entropy, gaussian_logpdf,
                     ou_moments_integrate, write_trajectory_csv)
from .scores import DirectScore, GaussianScore, PotentialScore, fit_initial_score
from .systems import make_system

__all__ = ["main", "build_run", "load_run_config"]


# ---------------------------------------------------------------- construction


def load_run_config(path=None, preset=None) -> RunConfig:
    """Config from a text file, a run manifest (``.json``), a preset, or a layering."""
    if path is None:
        if preset is None:
            raise ConfigError("give --config or --preset")
        return build_config({}, preset)
    p = Path(path)
    if p.suffix == ".json":
        if not p.is_file():
            raise ConfigError(f"manifest not found: {p}")
        doc = json.loads(p.read_text())
        return build_config(parse_text(doc["config"], str(p)), preset)
    return parse_config(p, preset)


def build_system(cfg: RunConfig):
    try:
        return make_system(cfg.system_name, cfg.system)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"system: {exc}") from None


def initial_state(cfg: RunConfig, system) -> GaussianState:
    s0 = cfg.get("init.sigma0")
    mean_mode = cfg.get("init.mean")
    if mean_mode == "trap" and "trap" in system.metadata:
        mean = np.tile(system.metadata["trap"](0.0), system.n_particles)
    elif mean_mode in ("zero", "trap"):
        mean = np.zeros(system.dim)
    else:
        raise ConfigError(f"init.mean: expected 'trap' or 'zero', got {mean_mode!r}")
    return GaussianState(mean, s0 ** 2 * np.eye(system.dim))


def initial_samples(cfg: RunConfig, state0: GaussianState) -> np.ndarray:
    rng = stream_rng(cfg.seed, "samples")
    s0 = np.sqrt(state0.cov[0, 0])
    return state0.mean + s0 * rng.standard_normal((cfg.n, state0.dim))


def build_model(cfg: RunConfig, system, state0: GaussianState):
    mtype = cfg.get("model.type")
    hidden = tuple(cfg.get("model.hidden"))
    rng = stream_rng(cfg.seed, "net")
    if mtype == "potential":
        m = PotentialScore.create(system.n_particles, system.ambient_dim, hidden, rng,
                                  cfg.get("model.symmetric_pair"))
        m.backend = cfg.get("model.backend")
        return m
    if mtype == "direct":
        # score only the coordinates the noise acts on
        out_idx = np.nonzero(np.any(system.sigma != 0, axis=1))[0]
        return DirectScore.create(system.dim, hidden, rng, output_index=out_idx,
                                  antisymmetric=cfg.get("model.antisymmetric"))
    if mtype == "gaussian":
        return GaussianScore(state0.mean, state0.cov)
    raise ConfigError(f"model.type: unknown model {mtype!r}")


def make_plan(cfg: RunConfig) -> StepPlan:
    p = cfg.sections["plan"]
    try:
        return StepPlan(dt=p["dt"], T=p["T"], integrator=p["integrator"],
                        n_opt_steps=p["n_opt_steps"], gtol=p["gtol"], lr=p["lr"],
                        warm_start=p["warm_start"], reset_adam=p["reset_adam"],
                        batch_size=p["batch_size"])
    except ValueError as exc:
        raise ConfigError(f"plan: {exc}") from None


def make_loss(cfg: RunConfig) -> LossConfig:
    p = cfg.sections["loss"]
    try:
        return LossConfig(kind=p["kind"], alpha=p["alpha"], doubling=p["doubling"],
                          divergence=p["divergence"])
    except ValueError as exc:
        raise ConfigError(f"loss: {exc}") from None


def _oracle_for(system, state0):
    if system.name in ("harmonic", "ou"):
        return OUOracle.from_system(system, state0, dt=1e-3)
    return None


def _masked_target(model, state0):
    idx = getattr(model, "output_index", None)
    if idx is None or len(idx) == state0.dim:
        return state0.score

    def target(x):
        s = state0.score(x)
        out = np.zeros_like(s)
        out[:, idx] = s[:, idx]
        return out
    return target


def build_run(cfg: RunConfig):
    """Everything needed to start a run: system, initial law, samples, fitted model, oracle."""
    system = build_system(cfg)
    state0 = initial_state(cfg, system)
    x0 = initial_samples(cfg, state0)
    model = build_model(cfg, system, state0)
    info = {"loss": 0.0, "iterations": 0, "converged": True}
    if model.n_params:
        f = cfg.sections["fit"]
        model, info = fit_initial_score(model, _masked_target(model, state0), x0, tol=f["tol"],
                                        lr=f["lr"], max_iter=f["max_iter"],
                                        batch_size=f["batch_size"],
                                        rng=stream_rng(cfg.seed, "init"))
    return system, state0, x0, model, _oracle_for(system, state0), info


# ---------------------------------------------------------------- manifest and outputs


def _versions() -> dict:
    import scipy
    out = {"python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__, "fpflow": __version__}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        pass
    return out


class RunDir:
    def __init__(self, out_dir, command: str, cfg: RunConfig):
        self.path = Path(out_dir)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.started = time.time()
        self.outputs: list[str] = []
        self._write_manifest("incomplete")

    def _write_manifest(self, status: str, extra: dict | None = None) -> None:
        doc = {"status": status, "command": self.command, "seed": self.cfg.seed,
               "preset": self.cfg.preset, "config": config_to_text(self.cfg),
               "versions": _versions(), "wall_time_s": time.time() - self.started,
               "outputs": sorted(self.outputs)}
        if extra:
            doc.update(extra)
        tmp = self.path / "manifest.json.tmp"
        tmp.write_text(json.dumps(doc, indent=2, default=float))
        tmp.replace(self.path / "manifest.json")

    def file(self, name: str) -> Path:
        self.outputs.append(name)
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def complete(self, extra: dict | None = None) -> None:
        self._write_manifest("complete", extra)


def _write_samples(path, x, t) -> None:
    np.savetxt(path, x, delimiter=",", header=f"t={t!r}",
               fmt="%.17g", comments="# ")


def _read_samples(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


def _score_history_from_dir(ckpt_dir: Path, template):
    files = sorted(ckpt_dir.glob("step_*.json"))
    if not files:
        raise FileNotFoundError(f"no checkpoints in {ckpt_dir}")
    entries = []
    for f in files:
        nets, meta = load_params(f)
        probe = template.copy()
        slots = probe.nets()
        for name, net in nets.items():
            if name not in slots or slots[name].sizes != net.sizes:
                raise ValueError(f"{f}: checkpoint does not match the configured model")
            slots[name].theta = net.theta
        entries.append((float(meta["t"]), probe.theta))
    entries.sort(key=lambda e: e[0])
    return ScoreHistory(template, [e[0] for e in entries], [e[1] for e in entries])


# ---------------------------------------------------------------- subcommands


def _cmd_solve(args, cfg: RunConfig, baseline: bool = False) -> int:
    run = RunDir(args.out_dir or cfg.get("run.out_dir"), args.command, cfg)
    system, state0, x0, model, oracle, info = build_run(cfg)
    plan = make_plan(cfg)
    loss = make_loss(cfg)
    every = max(1, cfg.get("run.checkpoint_every"))
    ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else run.path / "checkpoints"
    record_every = max(1, cfg.get("run.record_every"))
    snaps_t, snaps_x = [], []
    exact = model.n_params == 0
    n_steps = plan.timesteps().size

    def on_step(k, ens, m, rec):
        if not exact and (k % every == 0 or k == n_steps):
            p = ckpt_dir / f"step_{k:07d}.json"
            p.parent.mkdir(parents=True, exist_ok=True)
            save_params(p, m.nets(), {"t": ens.t, "step": k, "descriptor": m.descriptor()})
            run.outputs.append(str(p.relative_to(run.path)) if p.is_relative_to(run.path)
                               else str(p))
        if k % record_every == 0 or k == n_steps:
            snaps_t.append(ens.t)
            snaps_x.append(ens.x.copy())

    kl_ref = cfg.get("diagnostics.kl_reference")
    if kl_ref == "auto":
        kl_ref = "oracle" if oracle is not None else None
    elif kl_ref == "none":
        kl_ref = None
    g_mode = cfg.get("diagnostics.g_mode")
    G0 = state0.score(x0) if g_mode in ("linear", "numeric") else None
    full_score = getattr(model, "output_index", None) is None or \
        len(model.output_index) == system.dim
    h0 = gaussian_entropy(state0) if full_score else math.nan
    kw = dict(h0=h0, oracle=oracle, reference=kl_ref, G0=G0,
              g_mode=g_mode if G0 is not None else None,
              sde_compare=cfg.get("run.sde_compare"), track_div=cfg.get("diagnostics.track_div"),
              on_step=on_step)
    if exact:
        if oracle is None:
            raise ConfigError("model.type: gaussian needs a linear system")
        kw["score_fn"] = lambda t, x: oracle.state_at(t).score(x)
        res = run_sequential_sbtm(system, None, x0, plan, loss, cfg.seed, **kw)
    elif baseline:
        res = train_on_sde_baseline(system, model, x0, plan, loss, cfg.seed, **kw)
    else:
        res = run_sequential_sbtm(system, model, x0, plan, loss, cfg.seed, **kw)
    extra_cols = []
    if oracle is not None:
        extra_cols = ["H_oracle", "cov_trace_oracle"]
        for rec in res.records:
            st = oracle.state_at(rec.t)
            rec.extras["H_oracle"] = gaussian_entropy(st)
            rec.extras["cov_trace_oracle"] = float(np.trace(st.cov))
    write_records_csv(run.file("diagnostics.csv"), res.records, extra_cols)
    np.savez_compressed(run.file("trajectory.npz"), t=np.array(snaps_t), x=np.array(snaps_x))
    _write_samples(run.file("samples_final.csv"), res.ensemble.x, res.ensemble.t)
    run.complete({"initial_fit": {k: info[k] for k in ("loss", "iterations", "converged")}})
    return 0


def _cmd_reference(args, cfg: RunConfig, noisefree: bool) -> int:
    run = RunDir(args.out_dir or cfg.get("run.out_dir"), args.command, cfg)
    system = build_system(cfg)
    state0 = initial_state(cfg, system)
    x0 = initial_samples(cfg, state0)
    plan = make_plan(cfg)
    every = max(1, cfg.get("run.record_every"))
    if noisefree:
        snaps = noise_free_run(system, x0, plan, every)
    else:
        snaps = sde_euler_maruyama(system, x0, plan, cfg.seed, every)
    path = run.file("moments.csv")
    with open(path, "w") as fh:
        d = system.dim
        fh.write("t,cov_trace," + ",".join(f"mean_{i}" for i in range(d)) + "\n")
        for e in snaps:
            cov = np.atleast_2d(np.cov(e.x, rowvar=False)) if e.n > 1 else np.full((d, d), np.nan)
            vals = [e.t, float(np.trace(cov))] + list(e.x.mean(axis=0))
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")
    np.savez_compressed(run.file("trajectory.npz"), t=np.array([e.t for e in snaps]),
                        x=np.array([e.x for e in snaps]))
    _write_samples(run.file("samples_final.csv"), snaps[-1].x, snaps[-1].t)
    run.complete()
    return 0


def _cmd_oracle(args, cfg: RunConfig) -> int:
    run = RunDir(args.out_dir or cfg.get("run.out_dir"), args.command, cfg)
    system = build_system(cfg)
    state0 = initial_state(cfg, system)
    oracle = _oracle_for(system, state0)
    if oracle is None:
        raise ConfigError(f"system.name: no Gaussian oracle for {system.name!r}")
    plan = make_plan(cfg)
    every = max(1, cfg.get("run.record_every"))
    times = plan.times()[::every]
    if times[-1] != plan.times()[-1]:
        times = np.append(times, plan.times()[-1])
    states = ou_moments_integrate(oracle.Gamma, oracle.b, oracle.D, state0, times, plan.dt)
    write_trajectory_csv(run.file("oracle.csv"), states)
    run.complete()
    return 0


def _parse_point(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"--point: cannot parse {text!r}") from None


def _run_root(ckpt_dir: Path) -> Path:
    for cand in (ckpt_dir, ckpt_dir.parent):
        if (cand / "manifest.json").is_file():
            return cand
    raise FileNotFoundError(f"no manifest.json next to {ckpt_dir}")


def _cmd_density(args, cfg: RunConfig | None) -> int:
    if args.checkpoint_dir is None or args.point is None or args.time is None:
        raise ConfigError("density needs --checkpoint-dir, --point and --time")
    ckpt = Path(args.checkpoint_dir)
    root = _run_root(ckpt)
    if cfg is None:
        cfg = load_run_config(root / "manifest.json")
    system = build_system(cfg)
    state0 = initial_state(cfg, system)
    x = _parse_point(args.point).reshape(1, -1)
    if x.shape[1] != system.dim:
        raise ConfigError(f"--point: expected {system.dim} coordinates, got {x.shape[1]}")
    plan = make_plan(cfg)
    if cfg.get("model.type") == "gaussian":
        oracle = _oracle_for(system, state0)
        score_fn = lambda t, y: oracle.state_at(t).score(y)  # noqa: E731
        times = None
    else:
        template = build_model(cfg, system, state0)
        hist = _score_history_from_dir(ckpt, template)
        score_fn = frozen_score(hist)
        times = hist.times
    method = "exact" if system.dim <= 4 else "doubling"
    rho, lr = density_eval(system, score_fn, lambda y: gaussian_logpdf(state0, y), x, args.time,
                           plan.dt, times, method, rng=stream_rng(cfg.seed, "init", 99))
    out = Path(args.out_dir) if args.out_dir else root
    out.mkdir(parents=True, exist_ok=True)
    path = out / "density.csv"
    with open(path, "w") as fh:
        fh.write("t," + ",".join(f"x{i}" for i in range(system.dim)) + ",rho,log_rho\n")
        vals = [args.time] + list(x[0]) + [rho[0], lr[0]]
        fh.write(",".join(repr(float(v)) for v in vals) + "\n")
    print(path.read_text(), end="")
    return 0


def _cmd_kde(args, cfg: RunConfig) -> int:
    run = RunDir(args.out_dir or cfg.get("run.out_dir"), args.command, cfg)
    if args.samples is None:
        raise ConfigError("kde needs --samples FILE (a samples_final.csv)")
    x = _read_samples(args.samples)
    k = cfg.sections["kde"]
    grid = GridSpec(k["xmin"], k["xmax"], k["ymin"], k["ymax"], k["nx"], k["ny"])
    vals = kde_grid(x, grid, k["bandwidth"], k["coords"])
    write_grid_csv(run.file("kde.csv"), grid, vals)
    run.complete()
    return 0


def _cmd_diagnose(args, cfg: RunConfig | None) -> int:
    if args.run_dir is None:
        raise ConfigError("diagnose needs --run-dir")
    root = Path(args.run_dir)
    records = read_records_csv(root / "diagnostics.csv")
    if cfg is None:
        cfg = load_run_config(root / "manifest.json")
    window = max(1, cfg.get("diagnostics.rate_window"))
    times = np.array([r.t for r in records])
    rates = np.array([r.dHdt for r in records])
    H = entropy_trace(records[0].H, times, rates, "euler")
    smooth = entropy_rate(records, window)
    out = Path(args.out_dir) if args.out_dir else root
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "diagnose.csv", "w") as fh:
        cols = ["t", "H_recomputed", "dH/dt_smoothed", "kl_total"]
        has_oracle = "H_oracle" in records[0].extras
        if has_oracle:
            cols += ["H_error", "cov_trace_rel_error"]
        fh.write(",".join(cols) + "\n")
        for r, h, s in zip(records, H, smooth):
            vals = [r.t, h, s, r.kl_total]
            if has_oracle:
                vals += [h - r.extras["H_oracle"],
                         r.cov_trace / r.extras["cov_trace_oracle"] - 1.0]
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")
    return 0


# ---------------------------------------------------------------- argument parsing


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fpflow", description="Probability-flow Fokker-Planck solver")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file (key = value) or run manifest.json")
        p.add_argument("--preset", help="named preset; --config entries override it")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out-dir", help="override run.out_dir")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a single config entry")

    for name, helptext in [("solve", "sequential score-based transport"),
                           ("baseline-sde-train", "score fit on SDE samples (comparison)"),
                           ("sde", "Euler-Maruyama reference ensemble"),
                           ("noisefree", "drift-only integration"),
                           ("oracle", "Gaussian moment trajectory"),
                           ("kde", "kernel density grid from samples")]:
        p = sub.add_parser(name, help=helptext)
        common(p)
        if name in ("solve", "baseline-sde-train"):
            p.add_argument("--checkpoint-dir", help="where parameter checkpoints go")
        if name == "kde":
            p.add_argument("--samples", help="samples CSV")
    p = sub.add_parser("density", help="pointwise density from checkpoints")
    common(p)
    p.add_argument("--checkpoint-dir", help="checkpoint directory of a finished run")
    p.add_argument("--point", help="comma-separated coordinates")
    p.add_argument("--time", type=float, help="query time")
    p = sub.add_parser("diagnose", help="recompute diagnostics from a run directory")
    common(p)
    p.add_argument("--run-dir", help="run directory with diagnostics.csv")
    return ap


def _resolve_config(args) -> RunConfig | None:
    if args.config is None and args.preset is None:
        if args.command in ("density", "diagnose"):
            return None
        raise ConfigError("give --config or --preset")
    cfg = load_run_config(args.config, args.preset)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set: expected KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if overrides:
        base = parse_text(config_to_text(cfg))
        base.update(overrides)
        cfg = build_config(base, None)
        cfg.preset = args.preset
    if args.seed is not None:
        cfg.set("run.seed", args.seed)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        cmd = args.command
        if cmd == "solve":
            return _cmd_solve(args, cfg)
        if cmd == "baseline-sde-train":
            return _cmd_solve(args, cfg, baseline=True)
        if cmd == "sde":
            return _cmd_reference(args, cfg, noisefree=False)
        if cmd == "noisefree":
            return _cmd_reference(args, cfg, noisefree=True)
        if cmd == "oracle":
            return _cmd_oracle(args, cfg)
        if cmd == "density":
            return _cmd_density(args, cfg)
        if cmd == "kde":
            return _cmd_kde(args, cfg)
        if cmd == "diagnose":
            return _cmd_diagnose(args, cfg)
    except (ConfigError, FileNotFoundError, ValueError, FloatingPointError, KeyError,
            np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"fpflow {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 1  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
