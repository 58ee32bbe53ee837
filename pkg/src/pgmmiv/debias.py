"""Cross-fitted plug-in and debiased estimators for linear and nonlinear functionals."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .basis import Dictionary
from .functionals import FunctionalSpec, IVData
from .pgmm import (MomentData, PenaltyConfig, PGMMError, RieszFit, SolverConfig, adaptive_solve,
                   two_stage_solve, _solver)

log = logging.getLogger(__name__)

Z_975 = 1.959964


class FoldError(RuntimeError):
    def __init__(self, fold, err):
        super().__init__(f"fold {fold}: {err}")
        self.fold = fold
        self.cause = err


@dataclass(frozen=True, eq=False)
class FoldPlan:
    n: int
    L: int
    assignment: np.ndarray
    seed: Optional[int] = None

    def folds(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == k) for k in range(self.L)]

    def complement(self, *ks) -> np.ndarray:
        return np.flatnonzero(~np.isin(self.assignment, ks))

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.L)


def make_folds(n: int, L: int, seed: int = 0) -> FoldPlan:
    """Balanced random partition: sizes differ by at most one."""
    if L < 2:
        raise ValueError("need at least two folds")
    if L > n:
        raise ValueError(f"cannot split {n} observations into {L} folds")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % L
    return FoldPlan(n=n, L=L, assignment=assignment, seed=seed)


@dataclass
class DebiasedResult:
    theta_hat: float
    variance_hat: float
    se: float
    ci_95: tuple
    n: int
    estimator: str = "adml"
    per_fold: list = field(default_factory=list)
    psi_values: np.ndarray = field(default=None, repr=False)
    excluded: int = 0
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        return clean({
            "estimator": self.estimator, "theta_hat": self.theta_hat, "se": self.se,
            "variance_hat": self.variance_hat, "ci_95": list(self.ci_95), "n": self.n,
            "excluded": self.excluded, "per_fold": self.per_fold,
            "diagnostics": {k: v for k, v in self.diagnostics.items() if k != "audit"},
        })

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    CSV_HEADER = ("estimator", "theta_hat", "se", "ci_low", "ci_high", "n", "excluded")

    def csv_row(self) -> tuple:
        return (self.estimator, repr(self.theta_hat), repr(self.se), repr(self.ci_95[0]),
                repr(self.ci_95[1]), self.n, self.excluded)


def _result(values, estimator, **extra) -> DebiasedResult:
    n = values.shape[0]
    theta = float(np.mean(values))
    psi = values - theta
    if estimator == "plugin":
        var = float(np.var(values, ddof=1)) if n > 1 else 0.0
    else:
        var = float(np.mean(psi**2))
    se = float(np.sqrt(var / n))
    return DebiasedResult(theta_hat=theta, variance_hat=var, se=se,
                          ci_95=(theta - Z_975 * se, theta + Z_975 * se), n=n,
                          estimator=estimator, psi_values=psi, **extra)


@dataclass(frozen=True)
class RieszConfig:
    """How the Riesz representer coefficients are estimated on each fold."""

    penalty: PenaltyConfig = PenaltyConfig()
    solver: SolverConfig = SolverConfig()
    algorithm: str = "active_set"
    two_stage: bool = True
    adaptive: bool = True

    def fit(self, data: MomentData) -> RieszFit:
        if self.two_stage:
            return two_stage_solve(data, self.penalty, self.solver, self.algorithm, self.adaptive)
        system = data.system()
        if self.adaptive:
            return adaptive_solve(system, self.penalty, self.solver, solver=self.algorithm)
        return _solver(self.algorithm)(system, self.penalty, self.solver)


def _fit_gamma(fit_gamma, train):
    if isinstance(train, IVData):
        return fit_gamma(train.Y, train.X, train.Z)
    return fit_gamma(*train.pooled())


def _riesz_diag(fit: RieszFit) -> dict:
    return {"active_set_size": len(fit.active_set), "kkt_max_violation": float(fit.kkt_max_violation),
            "lambda": float(fit.lam), "notes": list(fit.notes)}


def plugin_estimate(spec: FunctionalSpec, gamma_per_fold, data, folds: FoldPlan) -> DebiasedResult:
    """Mean of m(W_i, gamma_l(i)); SE from the sample standard deviation of the m values."""
    values = np.empty(len(data))
    for k, idx in enumerate(folds.folds()):
        values[idx] = spec.evaluate(data.take(idx), gamma_per_fold[k])
    keep = np.isfinite(values)
    return _result(values[keep], "plugin", excluded=int((~keep).sum()))


def debias_linear(spec: FunctionalSpec, data: IVData, d_dict: Dictionary, b_dict: Dictionary,
                  fit_gamma: Callable, riesz: RieszConfig, folds: FoldPlan,
                  return_gammas: bool = False):
    """Cross-fitted debiased estimate of E[m(W, gamma)] for a linear functional.

    ``fit_gamma(Y, X, Z)`` returns a fitted structural function. With
    ``return_gammas`` the per-fold fits are returned as well, so the plug-in
    estimate can reuse them.
    """
    if not spec.is_linear:
        raise ValueError(f"{spec.name} is nonlinear; use debias_nonlinear")
    n = len(data)
    values = np.empty(n)
    per_fold, gammas = [], []
    for k, test_idx in enumerate(folds.folds()):
        train_idx = folds.complement(k)
        train, test = data.take(train_idx), data.take(test_idx)
        try:
            gamma = fit_gamma(train.Y, train.X, train.Z)
            md = MomentData(m_obs=spec.gateaux(train, None, d_dict), d_obs=d_dict.matrix(train.X),
                            b_obs=b_dict.matrix(train.Z))
            rf = riesz.fit(md)
        except (PGMMError, np.linalg.LinAlgError) as err:
            raise FoldError(k, err) from err
        alpha = b_dict.matrix(test.Z) @ rf.rho
        values[test_idx] = spec.evaluate(test, gamma) + alpha * (test.Y - gamma.predict(test.X))
        gammas.append(gamma)
        per_fold.append({"fold": k, "n_test": int(test_idx.size), **_riesz_diag(rf)})
    res = _result(values, "adml", per_fold=per_fold)
    return (res, gammas) if return_gammas else res


# ---------------------------------------------------------------------------
# nonlinear functionals over markets


def pair_key(a: int, b: int) -> tuple:
    if a == b:
        raise ValueError("a fold pair needs two distinct folds")
    return (min(a, b), max(a, b))


def fit_pair_gammas(panel, folds: FoldPlan, fit_gamma: Callable) -> tuple[dict, dict]:
    """One fit per unordered fold pair on the markets outside both folds."""
    fits, train_sets = {}, {}
    for a, b in itertools.combinations(range(folds.L), 2):
        idx = folds.complement(a, b)
        fits[(a, b)] = _fit_gamma(fit_gamma, panel.take(idx))
        train_sets[(a, b)] = idx
    return fits, train_sets


def _nonlinear_rows(spec, d_dict, folds, pair_gammas, data, k):
    """Stacked gateaux rows for the markets outside fold k, each from its pair-excluded fit."""
    rows, index = [], []
    for other in range(folds.L):
        if other == k:
            continue
        key = pair_key(k, other)
        if key not in pair_gammas:
            raise KeyError(f"missing pair fit for folds {key}")
        idx = np.flatnonzero(folds.assignment == other)
        rows.append(spec.gateaux(data.take(idx), pair_gammas[key], d_dict))
        index.append(idx)
    return np.vstack(rows), np.concatenate(index)


def build_M_nonlinear(spec: FunctionalSpec, d_dict: Dictionary, folds: FoldPlan, pair_gammas: dict,
                      data) -> list[np.ndarray]:
    """Per-fold target vectors averaged over off-fold markets with pair-excluded fits.

    Markets whose gateaux row is not finite are dropped from the average.
    """
    out = []
    for k in range(folds.L):
        rows, _ = _nonlinear_rows(spec, d_dict, folds, pair_gammas, data, k)
        ok = np.all(np.isfinite(rows), axis=1)
        if not ok.any():
            raise ValueError(f"fold {k}: no usable off-fold observations")
        out.append(rows[ok].mean(axis=0))
    return out


def nonlinear_riesz_config() -> RieszConfig:
    """Defaults for nonlinear targets: penalty shrinking like n^{-1/4}."""
    return RieszConfig(penalty=PenaltyConfig(rate="quarter"))


def debias_nonlinear(spec: FunctionalSpec, panel, d_dict: Dictionary, b_dict: Dictionary,
                     fit_gamma: Callable, riesz: RieszConfig, folds: FoldPlan, product: int = 1,
                     return_gammas: bool = False):
    """Double cross-fitted debiased estimate of a per-market nonlinear functional.

    ``panel`` is a MarketPanel and folds are over markets. The Riesz
    representer of fold k uses (d(omega), b(z)) of ``product`` on the
    off-fold markets and a target vector built from the pair-excluded fits;
    the correction term uses the fold-excluded fit. Markets with a singular
    share system under any fit they meet are dropped everywhere.
    """
    if spec.is_linear:
        log.info("linear spec passed to the nonlinear path; gateaux ignores gamma")
    T = panel.T
    j = product - 1
    omega = panel.omega()[:, j, :]
    z = panel.instruments()[:, j, :]
    y = panel.outcomes()[:, j]
    D_all, B_all = d_dict.matrix(omega), b_dict.matrix(z)

    pair_gammas, pair_train = fit_pair_gammas(panel, folds, fit_gamma)
    gammas, fold_train = [], []
    for k in range(folds.L):
        idx = folds.complement(k)
        gammas.append(_fit_gamma(fit_gamma, panel.take(idx)))
        fold_train.append(idx)

    # evaluation pass: value, residual and alpha per market
    m_vals = np.full(T, np.nan)
    resid = np.full(T, np.nan)
    for k, idx in enumerate(folds.folds()):
        sub = panel.take(idx)
        m_vals[idx] = spec.evaluate(sub, gammas[k])
        resid[idx] = y[idx] - gammas[k].predict(omega[idx])
    bad = ~np.isfinite(m_vals)

    rows_by_fold = []
    for k in range(folds.L):
        rows, index = _nonlinear_rows(spec, d_dict, folds, pair_gammas, panel, k)
        bad[index[~np.all(np.isfinite(rows), axis=1)]] = True
        rows_by_fold.append((rows, index))

    values = np.full(T, np.nan)
    per_fold = []
    for k, test_idx in enumerate(folds.folds()):
        rows, index = rows_by_fold[k]
        keep = ~bad[index]
        if not keep.any():
            raise FoldError(k, "no usable off-fold markets")
        md = MomentData(m_obs=rows[keep], d_obs=D_all[index[keep]], b_obs=B_all[index[keep]])
        try:
            rf = riesz.fit(md)
        except (PGMMError, np.linalg.LinAlgError) as err:
            raise FoldError(k, err) from err
        t_ok = test_idx[~bad[test_idx]]
        values[t_ok] = m_vals[t_ok] + (B_all[t_ok] @ rf.rho) * resid[t_ok]
        per_fold.append({"fold": k, "n_test": int(t_ok.size), **_riesz_diag(rf)})

    keep = ~bad
    diagnostics = {
        "pair_fits": len(pair_gammas),
        "fold_fits": len(gammas),
        "excluded_markets": panel.market_ids[bad].tolist(),
    }
    res = _result(values[keep], "adml", per_fold=per_fold, excluded=int(bad.sum()),
                  diagnostics=diagnostics)
    res.diagnostics["audit"] = {"pair_train": pair_train, "fold_train": fold_train}
    if return_gammas:
        return res, gammas
    return res
