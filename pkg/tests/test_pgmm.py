import numpy as np
import pytest
from hypothesis import given, strategies as st

from pgmmiv.pgmm import (DegenerateMomentError, MomentData, MomentSystem, PenaltyConfig, PGMMConvergenceError,
                         SingularSystemError, SolverConfig, adaptive_solve, closed_form_gmm, cross_validate_c1,
                         diagonal_weights, kkt_violations, objective_value, soft_threshold, solve_active_set,
                         solve_cd, two_stage_solve)

TIGHT = SolverConfig(tol=1e-12, max_sweeps=200_000)


def random_system(seed, q, p, diag=True):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(q, p))
    M = G @ (rng.normal(size=p) * (rng.random(p) < 0.4)) + 0.3 * rng.normal(size=q)
    Omega = rng.uniform(0.5, 2.0, q) if diag else None
    return MomentSystem(G, M, Omega, n=200)


def plain(lam):
    return PenaltyConfig(lam=lam, intercept=False)


@pytest.mark.parametrize("z,tau,expected", [(3, 1, 2), (-0.5, 1, 0), (-3, 1, -2)])
def test_soft_threshold(z, tau, expected):
    assert soft_threshold(z, tau) == expected


def test_soft_threshold_rejects_negative_tau():
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


def test_objective_examples():
    s = MomentSystem(np.array([[2.0]]), np.array([4.0]), np.array([1.0]))
    assert objective_value(s, plain(1.0), [1.0]) == pytest.approx(6.0)
    assert objective_value(s, plain(1.0), [0.0]) == pytest.approx(16.0)
    sq = MomentSystem(np.eye(3), np.array([1.0, 2.0, 3.0]))
    assert objective_value(sq, plain(0.0), [1.0, 2.0, 3.0]) == 0.0
    with pytest.raises(ValueError):
        objective_value(sq, plain(0.0), [1.0, 2.0])


def test_lambda_rate_and_intercept_loading():
    pen = PenaltyConfig(c1=0.5, c0=0.1)
    assert pen.lambda_for(10, 100) == pytest.approx(0.5 * np.sqrt(np.log(10) / 100))
    np.testing.assert_allclose(pen.loadings(3), [0.1, 1, 1])
    assert PenaltyConfig(c1=2.0, rate="quarter").lambda_for(10, 16) == pytest.approx(1.0)


def test_scalar_lasso_by_hand():
    s = MomentSystem(np.array([[1.0]]), np.array([1.0]), np.array([1.0]))
    for solve in (solve_cd, solve_active_set):
        assert solve(s, plain(0.25)).rho[0] == pytest.approx(0.75, abs=1e-12)


def test_full_shrinkage():
    s = random_system(1, 20, 8)
    lam = np.abs(s.c).max() * 1.01
    fit = solve_active_set(s, plain(lam))
    assert not fit.rho.any()
    assert fit.active_set.size == 0 and fit.augmentations == 0
    assert not solve_cd(s, plain(lam)).rho.any()
    assert kkt_violations(s, plain(lam), np.zeros(8)) == {}


def test_closed_form_against_whitened_lstsq():
    s = random_system(2, 6, 3)
    w = np.sqrt(s.Omega / s.q)
    oracle = np.linalg.lstsq(w[:, None] * s.G, w * s.M, rcond=None)[0]
    rho = closed_form_gmm(s)
    np.testing.assert_allclose(rho, oracle, atol=1e-12)
    # normal equations
    assert np.abs(s.G.T @ s.omega_q_apply(s.M - s.G @ rho)).max() < 1e-10
    np.testing.assert_allclose(closed_form_gmm(MomentSystem(np.eye(3), [4.0, 5.0, 6.0])), [4, 5, 6])


def test_closed_form_rejects_underdetermined():
    with pytest.raises(SingularSystemError):
        closed_form_gmm(random_system(3, 3, 5))
    G = np.ones((4, 2))
    with pytest.raises(SingularSystemError):
        closed_form_gmm(MomentSystem(G, np.ones(4)))


def test_zero_penalty_matches_closed_form():
    s = random_system(4, 5, 3)
    ref = closed_form_gmm(s)
    for solve in (solve_cd, solve_active_set):
        np.testing.assert_allclose(solve(s, plain(0.0), TIGHT).rho, ref, atol=1e-8)


def test_matches_sklearn_lasso():
    sk = pytest.importorskip("sklearn.linear_model")
    rng = np.random.default_rng(5)
    n, p = 80, 12
    X = rng.normal(size=(n, p))
    y = X[:, :3] @ [1.5, -2.0, 0.5] + 0.2 * rng.normal(size=n)
    # G = X, M = y, Omega = I with q = n gives (1/n)||y - X rho||^2 + 2 lam |rho|_1
    s = MomentSystem(X, y, np.ones(n))
    ref = sk.Lasso(alpha=0.05, fit_intercept=False, tol=1e-14, max_iter=100_000).fit(X, y).coef_
    for solve in (solve_cd, solve_active_set):
        np.testing.assert_allclose(solve(s, plain(0.05), TIGHT).rho, ref, atol=1e-8)


def test_sparse_instance_solvers_agree():
    rng = np.random.default_rng(6)
    q, p = 150, 100
    G = rng.normal(size=(q, p))
    truth = np.zeros(p)
    truth[[3, 40, 77]] = [2.0, -1.0, 0.5]
    s = MomentSystem(G, G @ truth + 0.05 * rng.normal(size=q))
    lam = 0.05 * np.abs(s.c).max()
    a, b = solve_cd(s, plain(lam), TIGHT), solve_active_set(s, plain(lam), TIGHT)
    assert np.abs(a.rho - b.rho).max() < 1e-8
    assert b.augmentations <= p and b.outer_iters_used <= p + 1


def test_kkt_flags_perturbed_coordinate():
    s = random_system(7, 30, 10)
    pen = plain(0.01 * np.abs(s.c).max())
    fit = solve_active_set(s, pen, TIGHT)
    slack = 1e-6
    assert kkt_violations(s, pen, fit.rho, slack) == {}
    j = int(fit.active_set[0])
    rho = fit.rho.copy()
    rho[j] += 10 * slack / s.H[j, j] * 2
    assert j in kkt_violations(s, pen, rho, slack)


def test_kkt_empty_at_closed_form():
    s = random_system(8, 12, 4)
    assert kkt_violations(s, plain(0.0), closed_form_gmm(s), 1e-8) == {}


def test_scaling_omega_and_lambda_keeps_argmin():
    s = random_system(9, 25, 8)
    lam, kappa = 0.02, 7.5
    a = solve_active_set(s, plain(lam), TIGHT).rho
    b = solve_active_set(s.scaled(kappa), plain(lam * kappa), TIGHT).rho
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_adaptive_unit_weights_bitwise():
    s = random_system(10, 25, 8)
    pen = plain(0.01)
    init = np.full(8, 0.1)
    a = adaptive_solve(s, pen, pilot=init, force_unit_weights=True)
    b = solve_active_set(s, replace_weights(pen, np.ones(8)), init=init)
    assert np.array_equal(a.rho, b.rho)


def replace_weights(pen, w):
    from dataclasses import replace
    return replace(pen, weights=tuple(w))


def test_adaptive_pilot_zeros_stay_zero():
    rng = np.random.default_rng(11)
    q, p = 60, 10
    G = rng.normal(size=(q, p))
    s = MomentSystem(G, G[:, :2] @ [1.0, -1.0] + 0.01 * rng.normal(size=q))
    pen = plain(0.05 * np.abs(s.c).max())
    pilot = solve_active_set(s, pen).rho
    fit = adaptive_solve(s, pen, pilot=pilot)
    assert set(np.nonzero(fit.rho)[0]) <= set(np.nonzero(pilot)[0])


def test_zero_curvature_coordinate_frozen():
    rng = np.random.default_rng(12)
    G = rng.normal(size=(10, 3))
    G[:, 1] = 0.0
    fit = solve_cd(MomentSystem(G, rng.normal(size=10)), plain(0.0))
    assert fit.rho[1] == 0.0 and fit.frozen == (1,)
    assert any("frozen" in n for n in fit.notes)


def test_non_convergence_signalled():
    rng = np.random.default_rng(13)
    A = rng.normal(size=(40, 6))
    G = A @ np.diag([1, 1, 1, 1, 1, 1e-3])
    G[:, 5] += G[:, 4]
    s = MomentSystem(G, rng.normal(size=40))
    with pytest.raises(PGMMConvergenceError) as err:
        solve_cd(s, plain(0.0), SolverConfig(tol=1e-12, max_sweeps=3))
    assert err.value.fit is not None


@given(st.integers(0, 10_000), st.sampled_from([(5, 3), (50, 3), (5, 40), (50, 40)]),
       st.sampled_from([1e-3, 1e-2, 1e-1]))
def test_objective_trace_nonincreasing_and_kkt(seed, shape, frac):
    s = random_system(seed, *shape)
    pen = plain(frac * np.abs(s.c).max())
    cfg = SolverConfig()
    for solve in (solve_cd, solve_active_set):
        try:
            fit, converged = solve(s, pen, cfg), True
        except PGMMConvergenceError as err:
            # plain CD may stall on rank-deficient p > q problems; it must say so
            assert solve is solve_cd and shape[1] > shape[0]
            fit, converged = err.fit, False
        tr = fit.objective_trace
        assert np.all(np.diff(tr) <= 1e-12 * (1 + np.abs(tr[:-1])))
        if converged:
            assert fit.kkt_max_violation <= cfg.tol * (1 + fit.lam)
            assert kkt_violations(s, pen, fit.rho, 10 * cfg.tol) == {}


def test_diagonal_weights_examples():
    np.testing.assert_allclose(diagonal_weights(np.ones((4, 2))), [1, 1])
    np.testing.assert_allclose(diagonal_weights(np.array([[1.0], [-1.0]])), [1.0])
    np.testing.assert_allclose(diagonal_weights(np.array([[3.0], [1.0]])), [0.2])
    with pytest.raises(DegenerateMomentError):
        diagonal_weights(np.array([[1.0, 0.0], [2.0, 0.0]]))


def moment_data(seed, n=300, q=6, p=4, scales=None):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(n, q))
    if scales is not None:
        D = D * scales
    B = D[:, :p] + 0.5 * rng.normal(size=(n, p))
    m = D + 0.1 * rng.normal(size=(n, q))
    return MomentData(m_obs=m, d_obs=D, b_obs=B)


def test_two_stage_reweights_noisy_moment():
    scales = np.ones(6)
    scales[2] = 10.0
    data = moment_data(14, scales=scales)
    pen = PenaltyConfig(lam=1e-3, intercept=False)
    s1 = solve_active_set(data.system(), pen)
    om = diagonal_weights(data.psi(s1.rho))
    # the noisy row's weight is about 100 times smaller than the others
    assert om[2] * 50 < np.median(om)
    fit = two_stage_solve(data, pen)
    assert "two-stage diagonal weighting" in fit.notes
    np.testing.assert_allclose(fit.omega, om)


def test_two_stage_single_moment_equals_rescaled_stage_one():
    rng = np.random.default_rng(15)
    n = 200
    d = rng.normal(size=(n, 1))
    data = MomentData(m_obs=d + rng.normal(size=(n, 1)), d_obs=d, b_obs=np.hstack([d, d**2]))
    lam = 1e-3
    two = two_stage_solve(data, PenaltyConfig(lam=lam, intercept=False), TIGHT)
    s2 = float(np.mean(data.psi(solve_active_set(data.system(), PenaltyConfig(lam=lam, intercept=False),
                                                 TIGHT).rho) ** 2))
    one = solve_active_set(data.system(), PenaltyConfig(lam=lam * s2, intercept=False), TIGHT)
    np.testing.assert_allclose(two.rho, one.rho, atol=1e-7)


def test_two_stage_falls_back_on_degenerate_moments():
    rng = np.random.default_rng(16)
    n = 100
    x = rng.normal(size=n)
    # first moment has m = d = 0 so its residual is identically zero
    data = MomentData(m_obs=np.column_stack([np.zeros(n), x + rng.normal(size=n)]),
                      d_obs=np.column_stack([np.zeros(n), x]), b_obs=np.column_stack([np.ones(n), x]))
    fit = two_stage_solve(data, PenaltyConfig(lam=1e-4))
    assert any("stage-2 skipped" in n_ for n_ in fit.notes)


def test_cv_single_and_duplicate_candidates():
    data = moment_data(17)
    folds = np.array_split(np.arange(data.n), 3)
    assert cross_validate_c1(data, folds, [0.05]).c1 == 0.05
    dup = cross_validate_c1(data, folds, [0.05, 0.05])
    assert dup.c1 == 0.05 and dup.curve[0] == dup.curve[1]


def test_cv_selects_argmin_of_curve():
    data = moment_data(18)
    folds = np.array_split(np.arange(data.n), 3)
    grid = list(np.logspace(-4, -1, 7))
    res = cross_validate_c1(data, folds, grid)
    assert np.all(np.isfinite(res.curve))
    assert res.curve[grid.index(res.c1)] <= res.curve.min()
    with pytest.raises(ValueError):
        cross_validate_c1(data, folds, [])
