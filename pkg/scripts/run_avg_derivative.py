"""Desk-scale average-derivative study: n = 1000, 200 replications for each k in --dims (default 2).

Writes results/avg_derivative_k{k}.csv and a JSON sidecar per k.
Usage: python scripts/run_avg_derivative.py [--dims 2 5 10] [--reps 200] [--seed 0]
"""
import argparse
import pathlib
import sys

from pgmmiv.cli import main


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dims", type=int, nargs="+", default=[2])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="results")
    return p.parse_args()


if __name__ == "__main__":
    args = parse()
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k in args.dims:
        code = main(["mc-avg-deriv", "--k", str(k), "--n", str(args.n), "--reps", str(args.reps),
                     "--seed", str(args.seed), "--csv", str(out / f"avg_derivative_k{k}.csv"),
                     "--json", str(out / f"avg_derivative_k{k}.json")])
        if code:
            sys.exit(code)
