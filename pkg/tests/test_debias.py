import json
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pgmmiv.basis import build_poly_dictionary
from pgmmiv.debias import (DebiasedResult, FoldError, RieszConfig, build_M_nonlinear, debias_linear,
                           debias_nonlinear, fit_pair_gammas, make_folds, plugin_estimate)
from pgmmiv.demand import LogitGamma, MarketPanel, simulate_logit_markets
from pgmmiv.functionals import (FunctionalSpec, IVData, avg_derivative_spec, build_M_linear, elasticity_spec)
from pgmmiv.mliv import PolyGamma, fit_double_lasso, fit_kernel_iv
from pgmmiv.pgmm import PenaltyConfig, RieszFit


def test_make_folds_examples():
    assert sorted(make_folds(10, 5, 0).sizes()) == [2] * 5
    assert sorted(make_folds(11, 5, 0).sizes()) == [2, 2, 2, 2, 3]
    a, b = make_folds(37, 4, 9), make_folds(37, 4, 9)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    with pytest.raises(ValueError):
        make_folds(3, 5)
    with pytest.raises(ValueError):
        make_folds(10, 1)


@given(st.integers(2, 200), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_folds_partition_and_balance(n, L, seed):
    if L > n:
        return
    plan = make_folds(n, L, seed)
    folds = plan.folds()
    np.testing.assert_array_equal(np.sort(np.concatenate(folds)), np.arange(n))
    assert plan.sizes().max() - plan.sizes().min() <= 1
    assert set(plan.complement(0)).isdisjoint(folds[0])


# linear path

def linear_data(n, seed, sigma=1.0, slope=2.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 1))
    return IVData(slope * X[:, 0] + sigma * rng.normal(size=n), X, X)


def ols_gamma(d_dict):
    return lambda Y, X, Z: fit_double_lasso(Y, X, Z, d_dict, d_dict, stage1_penalty=0.0, stage2_penalty=0.0,
                                            tol=1e-12)


def known_gamma(gamma):
    return lambda Y, X, Z: gamma


def test_plugin_with_true_linear_gamma():
    d = build_poly_dictionary(1, 1, True)
    data = linear_data(50, 1)
    truth = PolyGamma(d, np.array([0.0, 2.0]))
    folds = make_folds(50, 5, 1)
    res = plugin_estimate(avg_derivative_spec(0), [truth] * 5, data, folds)
    assert res.theta_hat == 2.0 and res.se == 0.0 and res.variance_hat == 0.0


def test_plugin_order_invariant_for_fixed_fit():
    d = build_poly_dictionary(2, 3, True)
    rng = np.random.default_rng(2)
    g = PolyGamma(d, rng.normal(size=d.size))
    data = IVData(np.zeros(40), rng.normal(size=(40, 2)), rng.normal(size=(40, 2)))
    perm = rng.permutation(40)
    a = plugin_estimate(avg_derivative_spec(0), [g] * 4, data, make_folds(40, 4, 0))
    b = plugin_estimate(avg_derivative_spec(0), [g] * 4, data.take(perm), make_folds(40, 4, 5))
    assert a.theta_hat == pytest.approx(b.theta_hat, abs=1e-12)
    assert a.se == pytest.approx(b.se, abs=1e-12)


def test_zero_alpha_collapses_to_plugin():
    d = build_poly_dictionary(1, 2, True)
    data = linear_data(200, 3)
    folds = make_folds(200, 5, 3)
    huge = RieszConfig(penalty=PenaltyConfig(lam=1e12, intercept=False), two_stage=False, adaptive=False)
    res, gammas = debias_linear(avg_derivative_spec(0), data, d, d, ols_gamma(d), huge, folds, return_gammas=True)
    assert all(f["active_set_size"] == 0 for f in res.per_fold)
    assert res.theta_hat == pytest.approx(plugin_estimate(avg_derivative_spec(0), gammas, data, folds).theta_hat,
                                          abs=1e-14)


def test_psi_centered_and_variance_nonnegative():
    d = build_poly_dictionary(1, 2, True)
    data = linear_data(300, 4)
    res = debias_linear(avg_derivative_spec(0), data, d, d, ols_gamma(d), RieszConfig(), make_folds(300, 5, 4))
    assert abs(res.psi_values.mean()) < 1e-10
    assert res.variance_hat >= 0 and res.variance_hat == pytest.approx(np.mean(res.psi_values**2))
    lo, hi = res.ci_95
    assert hi - res.theta_hat == pytest.approx(1.959964 * res.se)
    assert lo < res.theta_hat < hi


@dataclass(frozen=True)
class FixedRiesz:
    """Stand-in that returns the given coefficients on every fold."""

    rho: tuple

    def fit(self, md):
        rho = np.asarray(self.rho)
        return RieszFit(rho=rho, lam=0.0, weights=np.ones(rho.size), active_set=np.flatnonzero(rho),
                        objective_trace=np.zeros(1), kkt_max_violation=0.0, sweeps_used=0)


def test_true_riesz_representer_reproduces_semiparametric_se():
    # X = Z ~ N(0, 1): the representer of E[d gamma / d x] is x itself, so
    # psi = slope - theta + x * eps and the efficient SE is sigma / sqrt(n)
    d = build_poly_dictionary(1, 1, True)
    n, sigma = 400, 1.5
    ses = []
    for rep in range(100):
        data = linear_data(n, 100 + rep, sigma)
        res = debias_linear(avg_derivative_spec(0), data, d, d, ols_gamma(d), FixedRiesz((0.0, 1.0)),
                            make_folds(n, 5, rep))
        ses.append(res.se)
    assert np.mean(ses) == pytest.approx(sigma / np.sqrt(n), rel=0.2)


def test_se_shrinks_at_root_n():
    d = build_poly_dictionary(1, 2, True)
    se = {}
    for n in (500, 2000):
        vals = [debias_linear(avg_derivative_spec(0), linear_data(n, 7 * n + r), d, d, ols_gamma(d),
                              RieszConfig(), make_folds(n, 5, r)).se for r in range(5)]
        se[n] = np.mean(vals)
    assert se[500] / se[2000] == pytest.approx(2.0, rel=0.25)


def test_debiased_estimate_centers_on_truth():
    d = build_poly_dictionary(1, 2, True)
    data = linear_data(4000, 8)
    res = debias_linear(avg_derivative_spec(0), data, d, d, ols_gamma(d), RieszConfig(), make_folds(4000, 5, 8))
    assert abs(res.theta_hat - 2.0) < 4 * res.se


def test_fold_failure_names_the_fold():
    d = build_poly_dictionary(1, 1, True)
    data = linear_data(50, 9)

    class Broken:
        def fit(self, md):
            raise np.linalg.LinAlgError("boom")

    with pytest.raises(FoldError) as err:
        debias_linear(avg_derivative_spec(0), data, d, d, ols_gamma(d), Broken(), make_folds(50, 5, 0))
    assert err.value.fold == 0


def test_result_serialization():
    d = build_poly_dictionary(1, 1, True)
    res = debias_linear(avg_derivative_spec(0), linear_data(100, 10), d, d, ols_gamma(d), RieszConfig(),
                        make_folds(100, 5, 0))
    back = json.loads(res.to_json())
    assert back["theta_hat"] == res.theta_hat and back["n"] == 100
    assert len(res.csv_row()) == len(DebiasedResult.CSV_HEADER)


# nonlinear path

def small_panel(T=60, J=2, seed=11):
    return MarketPanel.from_markets(simulate_logit_markets(J, T, seed=seed))


def test_pair_fits_count_and_audit():
    panel = small_panel(T=50)
    folds = make_folds(50, 5, 0)
    seen = []

    def recorder(y, w, z):
        seen.append(len(y))
        return LogitGamma(2)

    fits, train = fit_pair_gammas(panel, folds, recorder)
    assert len(fits) == 10 and len(seen) == 10
    for (a, b), idx in train.items():
        assert not np.isin(folds.assignment[idx], [a, b]).any()


def test_nonlinear_audit_no_self_influence():
    panel = small_panel(T=50)
    folds = make_folds(50, 5, 1)
    d = build_poly_dictionary(10, 1, True)
    b = build_poly_dictionary(10, 1, False)
    res = debias_nonlinear(elasticity_spec(1), panel, d, b, lambda y, w, z: LogitGamma(2),
                           RieszConfig(penalty=PenaltyConfig(c1=1e-3)), folds)
    assert res.diagnostics["pair_fits"] == 10 and res.diagnostics["fold_fits"] == 5
    audit = res.diagnostics["audit"]
    for k, idx in enumerate(audit["fold_train"]):
        assert not np.isin(idx, folds.folds()[k]).any()
    # rows for fold k evaluated on markets of fold m use the (k, m) pair fit, trained without m
    for (a, bb), idx in audit["pair_train"].items():
        assert not np.isin(idx, np.concatenate([folds.folds()[a], folds.folds()[bb]])).any()
    assert "audit" not in res.to_dict()["diagnostics"]


def test_linear_spec_through_nonlinear_builder():
    rng = np.random.default_rng(12)
    data = IVData(np.zeros(40), rng.normal(size=(40, 2)), rng.normal(size=(40, 2)))
    d = build_poly_dictionary(2, 2, True)
    folds = make_folds(40, 4, 0)
    pairs = {(a, b): None for a in range(4) for b in range(a + 1, 4)}
    Ms = build_M_nonlinear(avg_derivative_spec(1), d, folds, pairs, data)
    for k in range(4):
        np.testing.assert_allclose(Ms[k], build_M_linear(avg_derivative_spec(1), d, data.take(folds.complement(k))),
                                   atol=1e-12)


def test_nonlinear_with_true_gamma_is_close_to_oracle():
    panel = small_panel(T=100, seed=13)
    d = build_poly_dictionary(10, 2, True)
    b = build_poly_dictionary(10, 2, False)
    res = debias_nonlinear(elasticity_spec(1), panel, d, b, lambda y, w, z: LogitGamma(2),
                           RieszConfig(penalty=PenaltyConfig(c1=1e-7)), make_folds(100, 5, 0))
    # with the true gamma, residuals are the demand shocks and the plug-in is exact
    truth = np.mean(-2.0 * panel.prices[:, 0] * (1 - panel.shares[:, 1]))
    assert abs(res.theta_hat - truth) < 4 * res.se + 1e-8
    assert abs(res.psi_values.mean()) < 1e-10


def test_nonlinear_drops_flagged_markets_everywhere():
    panel = small_panel(T=50, seed=14)
    base = elasticity_spec(1)
    flagged = {3, 17, 40}

    def mask(panel_, out):
        out = np.array(out, dtype=float)
        out[np.isin(panel_.market_ids, list(flagged))] = np.nan
        return out

    spec = FunctionalSpec("masked", False, lambda p, g: mask(p, base.evaluate(p, g)),
                          lambda p, g, dd: mask(p, base.gateaux(p, g, dd)))
    d = build_poly_dictionary(10, 1, True)
    b = build_poly_dictionary(10, 1, False)
    res = debias_nonlinear(spec, panel, d, b, lambda y, w, z: LogitGamma(2),
                           RieszConfig(penalty=PenaltyConfig(c1=1e-3)), make_folds(50, 5, 0))
    assert res.excluded == 3 and sorted(res.diagnostics["excluded_markets"]) == sorted(flagged)
    assert res.n == 47 and np.all(np.isfinite(res.psi_values))


def test_nonlinear_with_kernel_iv_runs():
    panel = small_panel(T=100, seed=15)
    d = build_poly_dictionary(10, 2, True)
    b = build_poly_dictionary(10, 2, False)
    res, gammas = debias_nonlinear(elasticity_spec(1), panel, d, b, fit_kernel_iv, RieszConfig(
        penalty=PenaltyConfig(c1=1e-7)), make_folds(100, 5, 0), return_gammas=True)
    assert len(gammas) == 5 and np.isfinite(res.theta_hat) and res.se > 0
    pi = plugin_estimate(elasticity_spec(1), gammas, panel, make_folds(100, 5, 0))
    assert pi.estimator == "plugin" and np.isfinite(pi.theta_hat)
