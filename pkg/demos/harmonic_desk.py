"""Desk-scale harmonic trap: learned SBTM run against the Gaussian oracle.

Runs ``fpflow solve --preset harmonic-desk`` (about 10 minutes on one core)
and prints entropy, covariance trace and Fisher divergence along the run.
Pass an existing run directory to skip the solve.
"""
import sys
from pathlib import Path

from fpflow.cli import main as fpflow
from fpflow.diagnostics import read_records_csv


def main(out="runs/harmonic-desk"):
    out = Path(out)
    if not (out / "diagnostics.csv").is_file():
        code = fpflow(["solve", "--preset", "harmonic-desk", "--out-dir", str(out)])
        if code:
            sys.exit(code)
    recs = read_records_csv(out / "diagnostics.csv")
    print(f"{'t':>5} {'H':>8} {'H oracle':>9} {'tr C':>7} {'oracle':>7} {'Fisher':>9}")
    for r in recs[::200] + ([recs[-1]] if (len(recs) - 1) % 200 else []):
        print(f"{r.t:5.2f} {r.H:8.4f} {r.extras['H_oracle']:9.4f} {r.cov_trace:7.4f} "
              f"{r.extras['cov_trace_oracle']:7.4f} {r.fisher_train:9.2e}")


if __name__ == "__main__":
    main(*sys.argv[1:])
