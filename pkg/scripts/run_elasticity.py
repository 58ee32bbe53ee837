"""Desk-scale own-price elasticity study: J = 2, T = 100, 100 replications.

The true elasticity comes from a 100,000-market presimulation unless
--theta0 is given. Writes results/elasticity_J{J}.csv and a JSON sidecar.
Usage: python scripts/run_elasticity.py [--J 2] [--T 100] [--reps 100] [--seed 0]
"""
import argparse
import pathlib
import sys

from pgmmiv.cli import main


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--J", type=int, default=2)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--theta0", type=float, default=None)
    p.add_argument("--out-dir", default="results")
    return p.parse_args()


if __name__ == "__main__":
    args = parse()
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    argv = ["mc-elasticity", "--J", str(args.J), "--T", str(args.T), "--reps", str(args.reps),
            "--seed", str(args.seed), "--csv", str(out / f"elasticity_J{args.J}.csv"),
            "--json", str(out / f"elasticity_J{args.J}.json")]
    if args.theta0 is not None:
        argv += ["--theta0", repr(args.theta0)]
    sys.exit(main(argv))
