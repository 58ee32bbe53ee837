"""Command-line entry points.

Every subcommand accepts ``--config FILE`` (YAML mapping whose keys are the
subcommand's long flags, dashes or underscores). Precedence: built-in
defaults < config file < command-line flags. Exit codes: 0 success,
2 usage or config error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np
import yaml

from . import __version__
from .basis import build_poly_dictionary
from .debias import RieszConfig, debias_nonlinear, make_folds, plugin_estimate
from .demand import MarketPanel, read_markets_csv, simulate_logit_markets, write_markets_csv
from .experiments import (ELASTICITY_C1, McConfig, run_avg_derivative_mc, run_elasticity_mc, table_rows,
                          write_outputs, TABLE_FIELDS)
from .functionals import FunctionalError, elasticity_spec
from .mliv import MLIVError, fit_kernel_iv
from .pgmm import (MomentSystem, PenaltyConfig, PGMMError, SolverConfig, adaptive_solve, objective_value,
                   SOLVERS)

log = logging.getLogger("pgmmiv")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "PGMMIV_SEED"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable
    default: Any
    help: str
    required: bool = False
    flag: bool = False

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _estimators(v):
    items = v if isinstance(v, (list, tuple)) else str(v).split(",")
    return tuple(x.strip() for x in items if str(x).strip())


def _opt_float(v):
    return None if v is None or str(v).lower() == "none" else float(v)


COMMON = [
    Opt("seed", int, 0, f"master seed (env {SEED_ENV} overrides the default, not an explicit flag)"),
    Opt("threads", int, os.cpu_count() or 1, "worker processes for replications"),
]

MC_SHARED = [
    Opt("reps", int, None, "number of replications", required=True),
    Opt("folds", int, 5, "cross-fitting folds L"),
    Opt("estimators", _estimators, ("plugin", "adml"), "comma-separated subset of plugin,adml"),
    Opt("c1", _opt_float, None, "PGMM penalty multiplier (None: design default)"),
    Opt("c0", float, 0.1, "intercept penalty factor"),
    Opt("csv", str, None, "summary table path (CSV with header)", required=True),
    Opt("json", str, None, "JSON sidecar path (config, seeds, per-replication records)"),
]

COMMANDS = {
    "mc-avg-deriv": [
        Opt("k", int, None, "covariate dimension", required=True),
        Opt("n", int, None, "sample size", required=True),
        *MC_SHARED,
        Opt("x-degree", int, 3, "polynomial degree of d(X), with interactions"),
        Opt("z-degree", int, 3, "polynomial degree of b(Z), with interactions"),
        Opt("stage1-penalty", float, 1e-4, "Double Lasso first-stage penalty"),
        Opt("stage2-penalty", _opt_float, None, "Double Lasso second-stage penalty (None: 3-fold CV)"),
        Opt("noise-scale", float, 1.0, "multiplier on the structural error"),
        Opt("structural", str, "nonlinear", "structural function: nonlinear or linear"),
        *COMMON,
    ],
    "mc-elasticity": [
        Opt("J", int, None, "products per market", required=True),
        Opt("T", int, None, "markets per replication", required=True),
        *MC_SHARED,
        Opt("product", int, 1, "target product (1-based)"),
        Opt("bandwidth-scale", float, 25.0, "KIV median-heuristic multiplier"),
        Opt("ridge1", _opt_float, None, "KIV stage-1 ridge (None: tuned out of sample)"),
        Opt("ridge2", _opt_float, None, "KIV stage-2 ridge (None: tuned out of sample)"),
        Opt("theta0", _opt_float, None, "true elasticity; skips presimulation"),
        Opt("theta0-presim", int, 100_000, "markets in the presimulation of the true elasticity"),
        Opt("presim-seed", int, 1, "seed of the presimulation"),
        *COMMON,
    ],
    "solve-pgmm": [
        Opt("G", str, None, "q x p matrix CSV (no header)", required=True),
        Opt("M", str, None, "q vector CSV (no header)", required=True),
        Opt("Omega", str, None, "q x q weight or q diagonal CSV (default identity)"),
        Opt("lam", _opt_float, None, "absolute penalty; overrides c1"),
        Opt("c1", float, 1e-2, "penalty multiplier, lam = c1 sqrt(log q / n)"),
        Opt("n", int, None, "sample size behind G and M (needed without --lam)"),
        Opt("c0", float, 0.1, "loading of the first coordinate with --intercept-first"),
        Opt("intercept-first", _bool, False, "treat coordinate 0 as an intercept", flag=True),
        Opt("adaptive", _bool, False, "adaptive weights from a unit-weight pilot", flag=True),
        Opt("solver", str, "active_set", f"one of {sorted(SOLVERS)}"),
        Opt("tol", float, 1e-6, "max coordinate change at convergence"),
        Opt("max-sweeps", int, 10_000, "sweep budget"),
        Opt("out", str, None, "output path for rho (one value per line)", required=True),
        Opt("diagnostics", str, None, "JSON diagnostics path"),
    ],
    "simulate-markets": [
        Opt("J", int, None, "products per market", required=True),
        Opt("T", int, None, "number of markets", required=True),
        Opt("seed", int, 0, f"seed (env {SEED_ENV} overrides the default)"),
        Opt("out", str, None, "markets CSV path", required=True),
    ],
    "estimate-elasticity": [
        Opt("markets", str, None, "markets CSV (one row per product-market)", required=True),
        Opt("product", int, 1, "target product (1-based)"),
        Opt("folds", int, 5, "cross-fitting folds over markets"),
        Opt("seed", int, 0, f"fold seed (env {SEED_ENV} overrides the default)"),
        Opt("c1", float, ELASTICITY_C1, "PGMM penalty multiplier"),
        Opt("c0", float, 0.1, "intercept penalty factor"),
        Opt("bandwidth-scale", float, 25.0, "KIV median-heuristic multiplier"),
        Opt("json", str, None, "write the result JSON here as well as to stdout"),
    ],
}

HELP = {
    "mc-avg-deriv": "Monte Carlo for the average derivative (Double Lasso + PGMM)",
    "mc-elasticity": "Monte Carlo for the average own-price elasticity (KIV + double cross-fitting)",
    "solve-pgmm": "solve a standalone penalized GMM system from CSV matrices",
    "simulate-markets": "simulate logit markets to CSV",
    "estimate-elasticity": "debiased own-price elasticity on a markets CSV",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pgmmiv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name],
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        sp.add_argument("--config", default=argparse.SUPPRESS, help="YAML file with flag values")
        for o in opts:
            label = "required" if o.required else f"default: {o.default}"
            kw = dict(dest=o.dest, default=argparse.SUPPRESS, help=f"{o.help} [{label}]")
            if o.flag:
                sp.add_argument(f"--{o.name}", action="store_const", const=True, **kw)
            else:
                sp.add_argument(f"--{o.name}", type=o.type, **kw)
    return p


def load_config(path: str, opts: list) -> dict:
    """YAML mapping of flag values; unknown keys and bad values report their line."""
    known = {o.dest: o for o in opts}
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}") from err
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise UsageError(f"{path}{where}: {getattr(err, 'problem', None) or err}") from err
    if data is None:
        return {}
    if not isinstance(data, dict) or not isinstance(node, yaml.MappingNode):
        raise UsageError(f"{path}: top level must be a mapping of flag names to values")
    lines = {str(k.value).replace("-", "_"): k.start_mark.line + 1 for k, _ in node.value}
    out = {}
    for key, value in data.items():
        dest = str(key).replace("-", "_")
        line = lines.get(dest, "?")
        if dest not in known:
            raise UsageError(f"{path}:{line}: unknown key {key!r}; allowed: {sorted(known)}")
        try:
            out[dest] = known[dest].type(value)
        except (TypeError, ValueError) as err:
            raise UsageError(f"{path}:{line}: bad value for {key!r}: {err}") from err
    return out


def resolve_options(args: argparse.Namespace) -> dict:
    opts = COMMANDS[args.command]
    values = {o.dest: o.default for o in opts}
    if "seed" in values and os.environ.get(SEED_ENV):
        try:
            values["seed"] = int(os.environ[SEED_ENV])
        except ValueError as err:
            raise UsageError(f"{SEED_ENV} must be an integer") from err
    if getattr(args, "config", None):
        values.update(load_config(args.config, opts))
    for o in opts:
        if hasattr(args, o.dest):
            values[o.dest] = getattr(args, o.dest)
    missing = [f"--{o.name}" for o in opts if o.required and values.get(o.dest) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    return values


def _positive(values, *keys):
    for k in keys:
        if values.get(k) is not None and values[k] < 1:
            raise UsageError(f"--{k.replace('_', '-')} must be at least 1")


def _mc_config(design, v) -> McConfig:
    common = dict(design=design, replications=v["reps"], folds=v["folds"], estimators=v["estimators"],
                  seed=v["seed"], c1=v["c1"], c0=v["c0"])
    try:
        if design == "avg_derivative":
            return McConfig(k=v["k"], n=v["n"], x_degree=v["x_degree"], z_degree=v["z_degree"],
                            stage1_penalty=v["stage1_penalty"], stage2_penalty=v["stage2_penalty"], noise_scale=v["noise_scale"],
                            structural=v["structural"], **common)
        return McConfig(J=v["J"], T=v["T"], product=v["product"], bandwidth_scale=v["bandwidth_scale"],
                        ridge1=v["ridge1"], ridge2=v["ridge2"], theta0=v["theta0"], presim_T=v["theta0_presim"],
                        presim_seed=v["presim_seed"], **common)
    except ValueError as err:
        raise UsageError(str(err)) from err


def _finish_mc(run, v) -> int:
    write_outputs(run, v["csv"], v.get("json"))
    w = csv.writer(sys.stdout)
    w.writerow(TABLE_FIELDS)
    w.writerows(table_rows(run))
    failed = sum(r["error"] is not None for r in run.records)
    if failed:
        print(f"{failed} replication(s) failed; see the JSON sidecar", file=sys.stderr)
    return EXIT_OK


def cmd_mc_avg_deriv(v) -> int:
    _positive(v, "reps", "k", "n", "threads")
    run = run_avg_derivative_mc(_mc_config("avg_derivative", v), threads=v["threads"])
    return _finish_mc(run, v)


def cmd_mc_elasticity(v) -> int:
    _positive(v, "reps", "J", "T", "threads")
    if v["theta0"] is None and v["theta0_presim"] < 1000:
        raise UsageError("--theta0-presim must be at least 1000")
    run = run_elasticity_mc(_mc_config("elasticity", v), threads=v["threads"])
    print(f"theta0 = {run.theta0!r}", file=sys.stderr)
    return _finish_mc(run, v)


def read_matrix_csv(path, ndim: int) -> np.ndarray:
    """Header-free numeric CSV; vectors may be one column or one row."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(x.strip() for x in r)]
    except OSError as err:
        raise UsageError(f"cannot read {path}: {err}") from err
    try:
        A = np.array([[float(x) for x in r] for r in rows])
    except ValueError as err:
        raise UsageError(f"{path}: malformed CSV ({err})") from err
    if A.size == 0 or A.ndim != 2:
        raise UsageError(f"{path}: malformed CSV (empty or ragged rows)")
    if ndim == 1:
        if 1 not in A.shape:
            raise UsageError(f"{path}: expected a vector, got shape {A.shape}")
        return A.reshape(-1)
    return A


def cmd_solve_pgmm(v) -> int:
    G = read_matrix_csv(v["G"], 2)
    M = read_matrix_csv(v["M"], 1)
    Omega = None
    if v["Omega"]:
        Omega = read_matrix_csv(v["Omega"], 2)
        if 1 in Omega.shape and Omega.shape != (1, 1):
            Omega = Omega.reshape(-1)
    if G.shape[0] != M.shape[0]:
        raise UsageError(f"G has {G.shape[0]} rows but M has {M.shape[0]} entries")
    if v["lam"] is None and v["n"] is None:
        raise UsageError("give --lam, or --n so that lam = c1 sqrt(log q / n)")
    try:
        system = MomentSystem(G=G, M=M, Omega=Omega, n=v["n"])
    except ValueError as err:
        raise UsageError(str(err)) from err
    penalty = PenaltyConfig(c1=v["c1"], c0=v["c0"], lam=v["lam"], intercept=v["intercept_first"])
    config = SolverConfig(tol=v["tol"], max_sweeps=v["max_sweeps"])
    if v["solver"] not in SOLVERS:
        raise UsageError(f"--solver must be one of {sorted(SOLVERS)}")
    if v["adaptive"]:
        fit = adaptive_solve(system, penalty, config, solver=v["solver"])
    else:
        fit = SOLVERS[v["solver"]](system, penalty, config)
    lam, w = penalty.resolve(system)
    if not np.any(fit.rho) and np.all(np.abs(system.c) <= lam * w):
        fit.notes.append("penalty at or above the full-shrinkage threshold: every coefficient is zero")
    with open(v["out"], "w", encoding="utf-8") as fh:
        fh.writelines(f"{x!r}\n" for x in fit.rho.tolist())
    diag = {
        "lambda": fit.lam,
        "objective": objective_value(system, PenaltyConfig(lam=fit.lam, weights=tuple(fit.weights),
                                                           intercept=False), fit.rho),
        "active_set": fit.active_set.tolist(),
        "kkt_max_violation": fit.kkt_max_violation,
        "sweeps": fit.sweeps_used,
        "outer_iterations": fit.outer_iters_used,
        "notes": fit.notes,
    }
    text = json.dumps(diag, indent=2)
    if v["diagnostics"]:
        with open(v["diagnostics"], "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_simulate_markets(v) -> int:
    _positive(v, "J", "T")
    write_markets_csv(simulate_logit_markets(v["J"], v["T"], seed=v["seed"]), v["out"])
    return EXIT_OK


def cmd_estimate_elasticity(v) -> int:
    try:
        panel = MarketPanel.from_markets(read_markets_csv(v["markets"]))
    except (OSError, ValueError) as err:
        raise UsageError(f"{v['markets']}: {err}") from err
    if not 1 <= v["product"] <= panel.J:
        raise UsageError(f"--product must lie in 1..{panel.J}")
    if v["folds"] < 2 or v["folds"] > panel.T:
        raise UsageError(f"--folds must lie in 2..{panel.T}")
    d_dict = build_poly_dictionary(panel.omega().shape[2], 2, True)
    b_dict = build_poly_dictionary(panel.instruments().shape[2], 2, False)
    folds = make_folds(panel.T, v["folds"], v["seed"])
    spec = elasticity_spec(v["product"])
    riesz = RieszConfig(penalty=PenaltyConfig(c1=v["c1"], c0=v["c0"]))

    def fit_gamma(y, w, z):
        return fit_kernel_iv(y, w, z, bandwidth_scale=v["bandwidth_scale"])

    adml, gammas = debias_nonlinear(spec, panel, d_dict, b_dict, fit_gamma, riesz, folds, v["product"],
                                    return_gammas=True)
    pi = plugin_estimate(spec, gammas, panel, folds)
    out = {"product": v["product"], "markets": panel.T, "adml": adml.to_dict(), "plugin": pi.to_dict()}
    text = json.dumps(out, indent=2)
    if v.get("json"):
        with open(v["json"], "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


HANDLERS = {
    "mc-avg-deriv": cmd_mc_avg_deriv,
    "mc-elasticity": cmd_mc_elasticity,
    "solve-pgmm": cmd_solve_pgmm,
    "simulate-markets": cmd_simulate_markets,
    "estimate-elasticity": cmd_estimate_elasticity,
}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve_options(args)
        return HANDLERS[args.command](values)
    except UsageError as err:
        print(f"pgmmiv {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (PGMMError, FunctionalError, MLIVError, np.linalg.LinAlgError, RuntimeError) as err:
        print(f"pgmmiv {args.command}: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
