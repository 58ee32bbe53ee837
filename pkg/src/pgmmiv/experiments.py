"""Monte Carlo harness: average-derivative and own-price-elasticity designs.

Seeding: replication r of a run with master seed s uses the 64-bit integer
``SeedSequence([s, r]).generate_state(1, uint64)[0]``. That integer seeds
the data draw, the fold split and (for markets) the per-market streams, so a
replication's output does not depend on which worker runs it or when.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from functools import partial
from typing import Optional

import numpy as np

from .basis import build_poly_dictionary
from .debias import (RieszConfig, debias_linear, debias_nonlinear, make_folds, plugin_estimate)
from .demand import LogitParams, MarketPanel, simulate_logit_markets, simulate_market
from .functionals import IVData, avg_derivative_spec, elasticity_spec, logit_elasticity_oracle
from .mliv import DEFAULT_STAGE2_GRID, fit_double_lasso, fit_kernel_iv
from .pgmm import PenaltyConfig, SolverConfig

log = logging.getLogger(__name__)

DESIGNS = ("avg_derivative", "elasticity")
ESTIMATORS = ("plugin", "adml")
# c1 by covariate dimension for the average-derivative design
AVG_DERIV_C1 = {2: 1e-2, 5: 1e-3, 10: 1e-4}
ELASTICITY_C1 = 1e-7
XZU_COV = np.array([[1.0, 0.8, 0.5], [0.8, 1.0, 0.0], [0.5, 0.0, 1.0]])


@dataclass(frozen=True)
class McConfig:
    design: str = "avg_derivative"
    k: int = 2
    n: int = 1000
    J: int = 2
    T: int = 100
    replications: int = 200
    folds: int = 5
    estimators: tuple = ESTIMATORS
    seed: int = 0
    c1: Optional[float] = None
    c0: float = 0.1
    penalty_rate: str = "sqrt_log"
    adaptive: bool = True
    two_stage: bool = True
    x_degree: int = 3
    z_degree: int = 3
    d_degree: int = 2
    b_degree: int = 2
    stage1_penalty: float = 1e-4
    stage2_penalty: Optional[float] = None  # fixed stage-2 penalty instead of CV
    bandwidth_scale: float = 25.0
    ridge1: Optional[float] = None
    ridge2: Optional[float] = None
    product: int = 1
    theta0: Optional[float] = None
    presim_T: int = 100_000
    presim_seed: int = 1
    noise_scale: float = 1.0
    structural: str = "nonlinear"

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {DESIGNS}, got {self.design!r}")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.folds < 2:
            raise ValueError("need at least two folds")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad or not self.estimators:
            raise ValueError(f"estimators must be a non-empty subset of {ESTIMATORS}")
        if self.structural not in ("nonlinear", "linear"):
            raise ValueError("structural must be 'nonlinear' or 'linear'")
        object.__setattr__(self, "estimators", tuple(self.estimators))

    def resolved_c1(self) -> float:
        if self.c1 is not None:
            return float(self.c1)
        if self.design == "elasticity":
            return ELASTICITY_C1
        return AVG_DERIV_C1.get(self.k, 1e-2)

    def riesz(self) -> RieszConfig:
        pen = PenaltyConfig(c1=self.resolved_c1(), c0=self.c0, rate=self.penalty_rate)
        return RieszConfig(penalty=pen, solver=SolverConfig(), two_stage=self.two_stage, adaptive=self.adaptive)


@dataclass
class McSummary:
    estimator: str
    abs_bias: float
    median_se: float
    coverage: float
    successes: int
    failures: int
    mean_theta: float = float("nan")

    def as_row(self) -> dict:
        return asdict(self)


def replication_seed(master: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(master), int(rep)]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# average derivative design


def avg_derivative_truth(X: np.ndarray, structural: str = "nonlinear") -> np.ndarray:
    if structural == "linear":
        return X[:, 0] + 0.5 * X[:, 1:].sum(axis=1)
    return X[:, 0] + np.exp(-0.5 * np.sum(X[:, 1:] ** 2, axis=1))


def simulate_avg_derivative(k: int, n: int, rng: np.random.Generator, noise_scale: float = 1.0,
                            structural: str = "nonlinear") -> IVData:
    """Independent (X_j, Z_j, u_j) normal triplets per coordinate; Y = gamma(X) + noise_scale * sum u."""
    chol = np.linalg.cholesky(XZU_COV)
    E = rng.standard_normal((n, k, 3)) @ chol.T
    X, Z, u = E[:, :, 0], E[:, :, 1], E[:, :, 2]
    Y = avg_derivative_truth(X, structural) + noise_scale * u.sum(axis=1)
    return IVData(Y, X, Z)


def _avg_derivative_rep(config: McConfig, rep: int) -> dict:
    seed = replication_seed(config.seed, rep)
    rng = np.random.default_rng(seed)
    data = simulate_avg_derivative(config.k, config.n, rng, config.noise_scale, config.structural)
    x_dict = build_poly_dictionary(config.k, config.x_degree, True)
    z_dict = build_poly_dictionary(config.k, config.z_degree, True)
    fit_gamma = partial(fit_double_lasso, x_dict=x_dict, z_dict=z_dict, stage1_penalty=config.stage1_penalty,
                        stage2_grid=DEFAULT_STAGE2_GRID, stage2_penalty=config.stage2_penalty)
    folds = make_folds(config.n, config.folds, seed)
    spec = avg_derivative_spec(0)
    adml, gammas = debias_linear(spec, data, x_dict, z_dict, fit_gamma, config.riesz(), folds,
                                 return_gammas=True)
    out = {"adml": adml}
    if "plugin" in config.estimators:
        out["plugin"] = plugin_estimate(spec, gammas, data, folds)
    return out


# ---------------------------------------------------------------------------
# elasticity design


def approximate_theta0_elasticity(J: int, presim_T: int = 100_000, seed: int = 1, product: int = 1,
                                  params: LogitParams = LogitParams()) -> float:
    """Mean closed-form logit own-price elasticity of ``product`` over presim_T simulated markets."""
    if presim_T < 1000:
        raise ValueError("presim_T must be at least 1000")
    total = 0.0
    for t in range(presim_T):
        m = simulate_market(J, params, seed, t)
        total += logit_elasticity_oracle(params.beta_p, m.prices[product - 1], m.shares[product])
    return total / presim_T


def _elasticity_rep(config: McConfig, rep: int) -> dict:
    seed = replication_seed(config.seed, rep)
    panel = MarketPanel.from_markets(simulate_logit_markets(config.J, config.T, seed=seed))
    dim = panel.omega().shape[2]
    dim_z = panel.instruments().shape[2]
    d_dict = build_poly_dictionary(dim, config.d_degree, True)
    b_dict = build_poly_dictionary(dim_z, config.b_degree, False)
    fit_gamma = partial(fit_kernel_iv, bandwidth_scale=config.bandwidth_scale, ridge1=config.ridge1,
                        ridge2=config.ridge2)
    folds = make_folds(config.T, config.folds, seed)
    spec = elasticity_spec(config.product)
    adml, gammas = debias_nonlinear(spec, panel, d_dict, b_dict, fit_gamma, config.riesz(), folds,
                                    product=config.product, return_gammas=True)
    out = {"adml": adml}
    if "plugin" in config.estimators:
        out["plugin"] = plugin_estimate(spec, gammas, panel, folds)
    return out


# ---------------------------------------------------------------------------
# driver


def run_replication(config: McConfig, rep: int) -> dict:
    """One replication -> record with per-estimator (theta, se, ci) or an error string."""
    runner = _avg_derivative_rep if config.design == "avg_derivative" else _elasticity_rep
    rec = {"rep": rep, "seed": replication_seed(config.seed, rep), "error": None}
    try:
        res = runner(config, rep)
    except Exception as err:  # recorded, not fatal
        log.warning("replication %d failed: %s", rep, err)
        rec["error"] = f"{type(err).__name__}: {err}"
        return rec
    for name in config.estimators:
        r = res[name]
        rec[name] = {"theta": r.theta_hat, "se": r.se, "ci": [r.ci_95[0], r.ci_95[1]], "excluded": r.excluded}
    return rec


def run_replications(config: McConfig, threads: int = 1) -> list[dict]:
    reps = range(config.replications)
    if threads <= 1:
        return [run_replication(config, r) for r in reps]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        records = list(pool.map(partial(run_replication, config), reps))
    return sorted(records, key=lambda r: r["rep"])


def summarize(records: list[dict], theta0: float, estimators=ESTIMATORS) -> dict[str, McSummary]:
    """|bias|, median SE and CI coverage per estimator over successful replications."""
    ok = [r for r in records if r.get("error") is None]
    if not ok:
        raise RuntimeError("all replications failed")
    fails = len(records) - len(ok)
    out = {}
    for name in estimators:
        rows = [r[name] for r in ok if name in r]
        if not rows:
            continue
        theta = np.array([x["theta"] for x in rows])
        se = np.array([x["se"] for x in rows])
        lo = np.array([x["ci"][0] for x in rows])
        hi = np.array([x["ci"][1] for x in rows])
        out[name] = McSummary(
            estimator=name,
            abs_bias=float(abs(theta.mean() - theta0)),
            median_se=float(np.median(se)),
            coverage=float(np.mean((lo <= theta0) & (theta0 <= hi))),
            successes=len(rows),
            failures=fails,
            mean_theta=float(theta.mean()),
        )
    return out


def theta0_for(config: McConfig) -> float:
    if config.theta0 is not None:
        return float(config.theta0)
    if config.design == "avg_derivative":
        return 1.0
    return approximate_theta0_elasticity(config.J, config.presim_T, config.presim_seed, config.product)


@dataclass
class McRun:
    config: McConfig
    theta0: float
    records: list
    summary: dict
    seconds: float = 0.0


def _run(config: McConfig, design: str, threads: int) -> McRun:
    if config.design != design:
        raise ValueError(f"config design is {config.design!r}, expected {design!r}")
    t0 = time.perf_counter()
    theta0 = theta0_for(config)
    records = run_replications(config, threads)
    summary = summarize(records, theta0, config.estimators)
    return McRun(config, theta0, records, summary, time.perf_counter() - t0)


def run_avg_derivative_mc(config: McConfig, threads: int = 1) -> McRun:
    return _run(config, "avg_derivative", threads)


def run_elasticity_mc(config: McConfig, threads: int = 1) -> McRun:
    return _run(config, "elasticity", threads)


TABLE_FIELDS = ("design", "dim", "size", "estimator", "abs_bias", "median_se", "coverage", "successes", "failures")


def table_rows(run: McRun) -> list[list]:
    c = run.config
    dim, size = (c.k, c.n) if c.design == "avg_derivative" else (c.J, c.T)
    return [[c.design, dim, size, s.estimator, repr(s.abs_bias), repr(s.median_se), repr(s.coverage),
             s.successes, s.failures] for s in run.summary.values()]


def write_outputs(run: McRun, csv_path, json_path=None) -> None:
    """Summary table as CSV (with header) plus a JSON sidecar of config, seeds and records."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_FIELDS)
        w.writerows(table_rows(run))
    if json_path is not None:
        side = {
            "config": {f.name: getattr(run.config, f.name) for f in fields(run.config)},
            "theta0": run.theta0,
            "replication_seeds": [r["seed"] for r in run.records],
            "summary": {k: v.as_row() for k, v in run.summary.items()},
            "records": run.records,
        }
        side["config"]["estimators"] = list(run.config.estimators)
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(side, fh, indent=2, sort_keys=True, allow_nan=True)
