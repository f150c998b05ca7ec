"""Run configuration: a flat ``key = value`` text format with dotted sections.

Example::

    system.name = harmonic
    system.N = 5
    plan.T = 2.0
    loss.alpha = 0.05

Parsing is strict: unknown keys and malformed values are errors that name
the offending key. Presets are plain dictionaries in the same format and can
be layered under a file (file entries win).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["RunConfig", "ConfigError", "PRESETS", "parse_config", "parse_text",
           "build_config", "config_to_text"]


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _int_list(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.replace(" ", "").split(",") if p)


def _opt_int(v: str):
    return None if v.strip().lower() in ("", "none") else int(v)


def _opt_float(v: str):
    return None if v.strip().lower() in ("", "none") else float(v)


# system parameters are validated per system by systems.make_system
SYSTEM_KEYS = {
    "harmonic": {"N": int, "alpha": float, "D": float, "a": float, "omega": float,
                 "trap": str, "dbar": int},
    "soft_sphere": {"N": int, "A": float, "r": float, "gamma_trap": float, "D": float,
                    "a": float, "omega": float, "trap": str, "dbar": int},
    "swimmer": {"gamma": float, "D": float},
    "ou": {"dim": int, "Gamma": float, "b": float, "D": float},
}

# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "init": {"sigma0": (float, 0.25), "mean": (str, "trap")},
    "model": {"type": (str, "potential"), "hidden": (_int_list, (100,)),
              "symmetric_pair": (_bool, False), "antisymmetric": (_bool, False),
              "backend": (str, "numba")},
    "fit": {"tol": (float, 1e-4), "lr": (float, 1e-4), "max_iter": (int, 20000),
            "batch_size": (_opt_int, None)},
    "loss": {"kind": (str, "denoising"), "alpha": (float, 0.05), "doubling": (_bool, True),
             "divergence": (str, "doubling")},
    "plan": {"dt": (float, 1e-3), "T": (float, 1.0), "integrator": (str, "euler"),
             "n_opt_steps": (int, 25), "gtol": (float, 0.1), "lr": (float, 1e-4),
             "warm_start": (_bool, True), "reset_adam": (_bool, False),
             "batch_size": (_opt_int, None)},
    "run": {"n": (_opt_int, None), "budget": (_opt_float, None), "seed": (int, 0),
            "out_dir": (str, "runs/out"), "checkpoint_every": (int, 100),
            "record_every": (int, 10), "sde_compare": (_bool, False)},
    "diagnostics": {"kl_reference": (str, "auto"), "g_mode": (str, "none"),
                    "rate_window": (int, 1), "track_div": (_bool, False)},
    "kde": {"xmin": (float, -2.5), "xmax": (float, 2.5), "ymin": (float, -4.0),
            "ymax": (float, 4.0), "nx": (int, 101), "ny": (int, 101),
            "bandwidth": (_opt_float, None), "coords": (_int_list, (0, 1))},
}


@dataclass
class RunConfig:
    system_name: str
    system: dict
    sections: dict = field(default_factory=dict)
    preset: str | None = None

    def get(self, key: str):
        sec, name = key.split(".", 1)
        return self.sections[sec][name]

    def set(self, key: str, value) -> None:
        sec, name = key.split(".", 1)
        self.sections[sec][name] = value

    @property
    def seed(self) -> int:
        return self.sections["run"]["seed"]

    @property
    def n(self) -> int:
        run = self.sections["run"]
        if run["n"] is not None:
            return run["n"]
        if run["budget"] is not None:
            N = int(self.system.get("N", 1))
            dbar = int(self.system.get("dbar", 2)) if "N" in self.system else self.dim
            return max(1, int(round(run["budget"] / (N * dbar))))
        return 1000

    @property
    def dim(self) -> int:
        if self.system_name in ("harmonic", "soft_sphere"):
            return int(self.system["N"]) * int(self.system.get("dbar", 2))
        if self.system_name == "swimmer":
            return 2
        return int(self.system.get("dim", 1))


PRESETS: dict[str, dict[str, str]] = {
    "harmonic-paper": {
        "system.name": "harmonic", "system.N": "50", "system.alpha": "0.5", "system.D": "0.25",
        "system.a": "2.0", "system.omega": "1.0", "init.sigma0": "0.25",
        "model.type": "potential", "model.hidden": "100",
        "plan.dt": "1e-3", "plan.T": "10.0", "plan.n_opt_steps": "25", "plan.gtol": "0.1",
        "plan.lr": "1e-4", "fit.tol": "1e-4", "fit.lr": "1e-4", "run.budget": "1e5",
        "loss.alpha": "0.05",
    },
    "harmonic-desk": {
        "system.name": "harmonic", "system.N": "5", "system.alpha": "0.5", "system.D": "0.25",
        "system.a": "2.0", "system.omega": "1.0", "init.sigma0": "0.25",
        "model.type": "potential", "model.hidden": "100",
        "plan.dt": "1e-3", "plan.T": "2.0", "plan.n_opt_steps": "25", "plan.gtol": "0.1",
        "plan.lr": "1e-4", "plan.batch_size": "200", "fit.tol": "1e-4", "fit.lr": "3e-3",
        "fit.batch_size": "200", "run.n": "1000", "loss.alpha": "0.05",
        "run.sde_compare": "true",
    },
    "soft-spheres-paper": {
        "system.name": "soft_sphere", "system.N": "5", "system.A": "10.0", "system.r": "0.5",
        "system.gamma_trap": "5.0", "system.D": "0.25", "system.a": "2.0", "system.omega": "1.0",
        "init.sigma0": "0.5", "model.type": "potential", "model.hidden": "32,32,32,32",
        "plan.dt": "1e-3", "plan.T": "10.0", "plan.n_opt_steps": "25", "plan.gtol": "0.0",
        "plan.lr": "5e-3", "fit.tol": "1e-6", "fit.lr": "5e-3", "run.n": "10000",
        "loss.alpha": "0.1",
    },
    "swimmer-paper": {
        "system.name": "swimmer", "system.gamma": "0.1", "system.D": "1.0",
        "init.sigma0": "1.0", "init.mean": "zero",
        "model.type": "direct", "model.hidden": "32,32,32", "model.antisymmetric": "true",
        "plan.dt": "1e-3", "plan.T": "100.0", "plan.n_opt_steps": "25", "plan.gtol": "0.05",
        "plan.lr": "1e-4", "fit.tol": "1e-4", "fit.lr": "1e-4", "run.n": "10000",
        "loss.alpha": "0.05",
    },
    "swimmer-desk": {
        "system.name": "swimmer", "system.gamma": "0.1", "system.D": "1.0",
        "init.sigma0": "1.0", "init.mean": "zero",
        "model.type": "direct", "model.hidden": "32,32,32", "model.antisymmetric": "true",
        "plan.dt": "5e-3", "plan.T": "20.0", "plan.n_opt_steps": "25", "plan.gtol": "0.05",
        "plan.lr": "1e-4", "fit.tol": "1e-4", "fit.lr": "1e-3", "run.n": "2000",
        "loss.alpha": "0.05",
    },
    "ou1d": {
        "system.name": "ou", "system.dim": "1", "system.Gamma": "1.0", "system.b": "0.0",
        "system.D": "1.0", "init.sigma0": "0.5", "init.mean": "zero",
        "model.type": "gaussian", "plan.dt": "1e-3", "plan.T": "2.0",
        "plan.integrator": "rk4", "run.n": "10000",
    },
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} needs a section (e.g. plan.dt)")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build_config(raw: dict[str, str], preset: str | None = None) -> RunConfig:
    """Validate raw entries (layered over ``preset``) into a ``RunConfig``."""
    merged: dict[str, str] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    merged.update(raw)
    name = merged.pop("system.name", None)
    if name is None:
        raise ConfigError("system.name is required")
    if name not in SYSTEM_KEYS:
        raise ConfigError(f"system.name: unknown system {name!r}; choose from {sorted(SYSTEM_KEYS)}")
    system: dict = {}
    sections = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for key, value in merged.items():
        sec, sub = key.split(".", 1)
        if sec == "system":
            typ = SYSTEM_KEYS[name].get(sub)
            if typ is None:
                raise ConfigError(f"{key}: unknown parameter for system {name!r}")
        elif sec in SCHEMA and sub in SCHEMA[sec]:
            typ = SCHEMA[sec][sub][0]
        else:
            raise ConfigError(f"{key}: unknown key")
        try:
            parsed = typ(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: cannot parse {value!r} ({exc})") from None
        if sec == "system":
            system[sub] = parsed
        else:
            sections[sec][sub] = parsed
    cfg = RunConfig(name, system, sections, preset)
    if cfg.n < 1:
        raise ConfigError("run.n: need at least one sample")
    return cfg


def parse_config(path, preset: str | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return build_config(parse_text(p.read_text(), str(p)), preset)


def config_to_text(cfg: RunConfig) -> str:
    """Serialise a config so that ``parse_text`` + ``build_config`` reproduce it."""
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(i) for i in v)
        if isinstance(v, float):
            return repr(v)
        return "none" if v is None else str(v)

    lines = [f"system.name = {cfg.system_name}"]
    lines += [f"system.{k} = {fmt(v)}" for k, v in sorted(cfg.system.items())]
    for sec in SCHEMA:
        lines += [f"{sec}.{k} = {fmt(v)}" for k, v in cfg.sections[sec].items()]
    return "\n".join(lines) + "\n"


def _replace_section(cfg: RunConfig, **updates) -> RunConfig:
    new = dataclasses.replace(cfg, sections={s: dict(v) for s, v in cfg.sections.items()})
    for key, value in updates.items():
        new.set(key.replace("__", "."), value)
    return new
