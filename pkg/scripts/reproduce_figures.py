"""Write plot-ready CSVs for the standard experiments.

Runs the zero-field relaxation, the |E| = 500 and 2500 V/cm runs (with the
B11 kernel for 500) and the field sweep into subdirectories of ``--out``.

    python3 scripts/reproduce_figures.py --out results --set mesh_h=0.02
"""

import argparse
import sys
from pathlib import Path

from eptissue.cli import main

RUNS = {
    "relaxation_E0": ["E_field=0", "dt=1/3"],
    "run_E500": ["E_field=500", "write_kernel=true", "membrane_stride=6"],
    "run_E2500": ["E_field=2500", "membrane_stride=6"],
}


def sets(items):
    return [arg for item in items for arg in ("--set", item)]


def cli():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--set", dest="extra", action="append", default=[],
                    help="extra key=value applied to every experiment")
    ap.add_argument("--threads", default="1")
    args = ap.parse_args()
    status = 0
    for name, items in RUNS.items():
        code = main(["run", "--out", str(args.out / name), "--threads", args.threads,
                     *sets(items + args.extra)])
        print(f"{name}: exit {code}")
        status = status or code
    code = main(["sweep", "--out", str(args.out / "sweep"), "--threads", args.threads,
                 *sets(args.extra)])
    print(f"sweep: exit {code}")
    return status or code


if __name__ == "__main__":
    sys.exit(cli())
