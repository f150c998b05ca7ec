"""Active swimmer at desk scale: SBTM vs SDE vs noise-free, and the stationary current.

Runs the three swimmer-desk commands (SBTM takes the longest), compares the
final KDEs and prints the circulation of j = v rho around the origin.
"""
import sys
from pathlib import Path

import numpy as np

from fpflow.cli import (_read_samples, _score_history_from_dir, build_model, build_system,
                        initial_state, load_run_config, main as fpflow)
from fpflow.diagnostics import (GridSpec, frozen_score, grid_l1, kde_grid, kde_points,
                                loop_integral, probability_current)


def main(root="runs/swimmer-desk"):
    root = Path(root)
    dirs = {}
    for kind, cmd in (("sbtm", "solve"), ("sde", "sde"), ("noisefree", "noisefree")):
        dirs[kind] = root / kind
        if not (dirs[kind] / "samples_final.csv").is_file():
            if fpflow([cmd, "--preset", "swimmer-desk", "--out-dir", str(dirs[kind])]):
                sys.exit(1)
    cfg = load_run_config(dirs["sbtm"] / "manifest.json")
    system = build_system(cfg)
    xs = {k: _read_samples(d / "samples_final.csv") for k, d in dirs.items()}
    k = cfg.sections["kde"]
    grid = GridSpec(k["xmin"], k["xmax"], k["ymin"], k["ymax"], k["nx"], k["ny"])
    dens = {key: kde_grid(x, grid) for key, x in xs.items()}
    print(f"var(v) SBTM {np.var(xs['sbtm'][:, 1]):.3f}, SDE {np.var(xs['sde'][:, 1]):.3f}")
    print(f"KDE L1  SBTM-SDE {grid_l1(dens['sbtm'], dens['sde']):.3f}   "
          f"SBTM-noisefree {grid_l1(dens['sbtm'], dens['noisefree']):.3f}")

    T = cfg.get("plan.T")
    hist = _score_history_from_dir(dirs["sbtm"] / "checkpoints",
                                   build_model(cfg, system, initial_state(cfg, system)))
    score = frozen_score(hist)
    for r in (0.5, 1.0, 1.5, 2.0):
        c = loop_integral(lambda p: probability_current(system, score, p, T,
                                                        rho=kde_points(xs["sbtm"], p)), r)
        print(f"circulation of j at r={r}: {c:+.4f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
