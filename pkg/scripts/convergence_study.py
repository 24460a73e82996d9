"""Mesh and time-step convergence studies of sigma_eff,11(T).

Prints the successive differences and fitted slopes and writes the CSVs
under ``--out``.  The defaults take a few minutes on one core; pass
``--quick`` for a coarse smoke run.
"""

import argparse
import sys
from pathlib import Path

from eptissue.cli import main

QUICK = {
    "converge-mesh": ["conv_h=0.08, 0.04, 0.02", "conv_mesh_dt=0.5"],
    "converge-time": ["mesh_h=0.04", "conv_dt=0.5", "conv_levels=3"],
}


def cli():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    status = 0
    for command, name in (("converge-mesh", "convergence_mesh"),
                          ("converge-time", "convergence_time")):
        extra = [a for item in QUICK[command] for a in ("--set", item)] if args.quick else []
        out = args.out / name
        code = main([command, "--out", str(out), *extra])
        status = status or code
        if code == 0:
            print((out / f"{name}.csv").read_text(), end="")
            print((out / f"{name}_fit.csv").read_text())
    return status


if __name__ == "__main__":
    sys.exit(cli())
