"""Structural-function estimators under endogeneity: Double Lasso and Kernel IV."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.spatial.distance import cdist, pdist

from .basis import Dictionary
from .pgmm import _cd_kernel


class MLIVError(RuntimeError):
    pass


def _points(points, dim):
    P = np.asarray(points, dtype=float)
    single = P.ndim == 1
    if single:
        P = P[None, :]
    if P.ndim != 2 or (P.shape[0] and P.shape[1] != dim):
        raise ValueError(f"expected points with {dim} coordinates, got shape {np.shape(points)}")
    if P.shape[0] == 0:
        P = P.reshape(0, dim)
    return P, single


class GammaEstimate:
    """Fitted structural function with prediction and analytic gradient."""

    kind: str
    input_dim: int

    def predict(self, points) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, points) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, points):
        return self.predict(points)


@dataclass(eq=False)
class PolyGamma(GammaEstimate):
    """gamma(x) = d(x)' coef on a fixed dictionary."""

    dictionary: Dictionary
    coef: np.ndarray
    kind: str = "double_lasso"
    info: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.dictionary.input_dim

    def predict(self, points):
        P, single = _points(points, self.input_dim)
        if P.shape[0] == 0:
            return np.zeros(0)
        out = self.dictionary.matrix(P) @ self.coef
        return out[0] if single else out

    def gradient(self, points):
        P, single = _points(points, self.input_dim)
        out = np.einsum("nkd,k->nd", self.dictionary.jacobian(P), self.coef)
        return out[0] if single else out


# ---------------------------------------------------------------------------
# lasso on top of the PGMM coordinate-descent kernel


@dataclass
class LassoFit:
    intercept: float
    coef: np.ndarray
    alpha: float
    converged: bool


def _lasso_gram(X, y):
    n = X.shape[0]
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    H = np.ascontiguousarray(Xc.T @ Xc / n)
    c = Xc.T @ yc / n
    return H, c, float(yc @ yc / n), xm, ym


def _lasso_cd(H, c, const, alpha, init, tol, max_sweeps):
    p = H.shape[0]
    rho = np.zeros(p) if init is None else np.array(init, dtype=float)
    g = H @ rho
    thr = np.full(p, float(alpha))
    trace = np.empty(0)
    _, delta, _ = _cd_kernel(H, c, thr, rho, g, np.arange(p, dtype=np.int64),
                             float(tol), int(max_sweeps), const, trace, 0)
    return rho, delta < tol


def lasso(X, y, alpha: float, tol: float = 1e-6, max_sweeps: int = 10_000, init=None) -> LassoFit:
    """(1/2n)||y - a - X b||^2 + alpha |b|_1 with an unpenalized intercept."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[1] == 0:
        return LassoFit(float(y.mean()), np.zeros(0), alpha, True)
    H, c, const, xm, ym = _lasso_gram(X, y)
    b, ok = _lasso_cd(H, c, const, alpha, init, tol, max_sweeps)
    if not ok:
        warnings.warn(f"lasso did not converge at alpha={alpha:g}", RuntimeWarning, stacklevel=2)
    return LassoFit(float(ym - xm @ b), b, float(alpha), ok)


def lasso_cv(X, y, alphas: Sequence[float], n_folds: int = 3, tol: float = 1e-6,
             max_sweeps: int = 10_000) -> tuple[LassoFit, np.ndarray]:
    """Contiguous K-fold CV over ``alphas`` with warm-started paths.

    Returns the refit at the selected alpha and the mean held-out MSE per alpha
    (in the order given). Ties go to the larger alpha.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if n <= n_folds:
        raise MLIVError(f"n={n} too small for {n_folds}-fold CV")
    alphas = np.asarray(alphas, dtype=float)
    order = np.argsort(-alphas, kind="stable")
    mse = np.zeros(alphas.size)
    bounds = np.linspace(0, n, n_folds + 1).astype(int)
    for k in range(n_folds):
        test = np.arange(bounds[k], bounds[k + 1])
        train = np.setdiff1d(np.arange(n), test)
        H, c, const, xm, ym = _lasso_gram(X[train], y[train])
        b = None
        for a_idx in order:
            b, _ = _lasso_cd(H, c, const, alphas[a_idx], b, tol, max_sweeps)
            resid = y[test] - (ym - xm @ b) - X[test] @ b
            mse[a_idx] += np.mean(resid**2) / n_folds
    finite = np.where(np.isfinite(mse), mse, np.inf)
    best_val = finite.min()
    cands = [i for i in order if finite[i] == best_val]
    best = cands[0]
    H, c, const, xm, ym = _lasso_gram(X, y)
    b = None
    for a_idx in order:
        b, ok = _lasso_cd(H, c, const, alphas[a_idx], b, tol, max_sweeps)
        if a_idx == best:
            break
    return LassoFit(float(ym - xm @ b), b, float(alphas[best]), ok), mse


DEFAULT_STAGE2_GRID = tuple(np.logspace(-7, -1, 100))


def fit_double_lasso(Y, X, Z, x_dict: Dictionary, z_dict: Dictionary, stage1_penalty: float = 1e-4,
                     stage2_folds: int = 3, stage2_grid: Sequence[float] = DEFAULT_STAGE2_GRID,
                     stage2_penalty: Optional[float] = None, tol: float = 1e-6,
                     max_sweeps: int = 10_000) -> PolyGamma:
    """Lasso first stage for every non-constant d_j(X) on b(Z), lasso second stage of Y.

    ``stage2_penalty`` skips cross-validation and uses that penalty directly.
    """
    Y = np.asarray(Y, dtype=float).reshape(-1)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if X.shape[0] != Y.shape[0] or Z.shape[0] != Y.shape[0]:
        raise ValueError("Y, X, Z must have the same number of rows")
    if X.shape[1] != x_dict.input_dim or Z.shape[1] != z_dict.input_dim:
        raise ValueError("dictionary dimensions do not match the data")
    n = Y.shape[0]
    if stage2_penalty is None and n <= stage2_folds:
        raise MLIVError("n must exceed the CV fold count")
    D = x_dict.matrix(X)[:, 1:]
    B = z_dict.matrix(Z)[:, 1:]
    D_hat = np.empty_like(D)
    unconverged = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for j in range(D.shape[1]):
            f = lasso(B, D[:, j], stage1_penalty, tol, max_sweeps)
            unconverged += not f.converged
            D_hat[:, j] = f.intercept + B @ f.coef
    if stage2_penalty is None:
        fit2, curve = lasso_cv(D_hat, Y, stage2_grid, stage2_folds, tol, max_sweeps)
    else:
        fit2 = lasso(D_hat, Y, stage2_penalty, tol, max_sweeps)
        curve = None
    coef = np.concatenate([[fit2.intercept], fit2.coef])
    info = {"stage1_unconverged": unconverged, "stage2_alpha": fit2.alpha,
            "stage2_converged": fit2.converged, "cv_curve": curve}
    return PolyGamma(dictionary=x_dict, coef=coef, info=info)


# ---------------------------------------------------------------------------
# kernel IV


def median_heuristic(points, scale: float = 1.0, max_points: int = 2000) -> float:
    """scale * median pairwise Euclidean distance (evenly subsampled to max_points rows)."""
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[0] > max_points:
        P = P[np.linspace(0, P.shape[0] - 1, max_points).astype(int)]
    if P.shape[0] < 2:
        raise MLIVError("median heuristic needs at least two points")
    med = float(np.median(pdist(P)))
    if not med > 0:
        raise MLIVError("degenerate bandwidth: points are (mostly) identical")
    return scale * med


def gaussian_kernel(A, B, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * bandwidth**2))


def _spd_solve(A, B):
    A = 0.5 * (A + A.T)
    jitter = 0.0
    scale = np.trace(A) / A.shape[0]
    for _ in range(8):
        try:
            return cho_solve(cho_factor(A + jitter * np.eye(A.shape[0])), B)
        except LinAlgError:
            jitter = 1e-12 * scale if jitter == 0.0 else jitter * 100
    return np.linalg.lstsq(A, B, rcond=None)[0]


@dataclass(eq=False)
class KernelIVGamma(GammaEstimate):
    """gamma(x) = offset + sum_i weights_i k(x_i, x) over the stage-1 X sample."""

    centers: np.ndarray
    weights: np.ndarray
    bandwidth: float
    offset: float = 0.0
    kind: str = "kernel_iv"
    info: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.centers.shape[1]

    def predict(self, points):
        P, single = _points(points, self.input_dim)
        if P.shape[0] == 0:
            return np.zeros(0)
        out = self.offset + gaussian_kernel(P, self.centers, self.bandwidth) @ self.weights
        return out[0] if single else out

    def gradient(self, points):
        P, single = _points(points, self.input_dim)
        Kw = gaussian_kernel(P, self.centers, self.bandwidth) * self.weights[None, :]
        # d/dx k(x, c) = k(x, c) (c - x) / h^2
        out = (Kw @ self.centers - Kw.sum(axis=1, keepdims=True) * P) / self.bandwidth**2
        return out[0] if single else out


def kiv_stages(X1, Z1, X2, Z2, Y2, bw_x: float, bw_z: float, ridge1: float, ridge2: float) -> KernelIVGamma:
    """Two-stage kernel ridge: embed the X-features given Z on sample 1, regress Y on sample 2."""
    n1, m = X1.shape[0], X2.shape[0]
    offset = float(np.mean(Y2))
    K_xx = gaussian_kernel(X1, X1, bw_x)
    K_zz = gaussian_kernel(Z1, Z1, bw_z)
    K_zz2 = gaussian_kernel(Z1, Z2, bw_z)
    W = K_xx @ _spd_solve(K_zz + n1 * ridge1 * np.eye(n1), K_zz2)
    weights = _spd_solve(W @ W.T + m * ridge2 * K_xx, W @ (Y2 - offset))
    return KernelIVGamma(centers=X1.copy(), weights=weights, bandwidth=bw_x, offset=offset,
                         info={"bw_z": bw_z, "ridge1": ridge1, "ridge2": ridge2, "n1": n1, "n2": m})


DEFAULT_RIDGE_GRID = tuple(np.logspace(-12, 0, 25))


def select_kiv_ridges(X1, Z1, Y1, X2, Z2, Y2, bw_x: float, bw_z: float,
                      grid: Sequence[float] = DEFAULT_RIDGE_GRID) -> tuple[float, float, dict]:
    """Out-of-sample ridge choice for both stages.

    Stage 1 is scored on sample 2 by the feature-space error of the
    conditional mean embedding; stage 2 is scored on sample 1 by the squared
    error of Y against the embedded prediction. Ties go to the larger ridge.
    """
    n1 = X1.shape[0]
    K_xx = gaussian_kernel(X1, X1, bw_x)
    K_zz = gaussian_kernel(Z1, Z1, bw_z)
    K_zz2 = gaussian_kernel(Z1, Z2, bw_z)
    K_xx2 = gaussian_kernel(X1, X2, bw_x)
    grid = sorted((float(g) for g in grid), reverse=True)
    loss1 = []
    for r in grid:
        B = _spd_solve(K_zz + n1 * r * np.eye(n1), K_zz2)
        # ||phi(x~) - mu(z~)||^2 averaged, dropping the constant k(x~, x~) = 1
        loss1.append(float(np.mean(np.sum(B * (K_xx @ B), axis=0) - 2.0 * np.sum(K_xx2 * B, axis=0))))
    r1 = grid[int(np.argmin(loss1))]
    W1 = K_xx @ _spd_solve(K_zz + n1 * r1 * np.eye(n1), K_zz)
    loss2 = []
    for r in grid:
        g = kiv_stages(X1, Z1, X2, Z2, Y2, bw_x, bw_z, r1, r)
        pred = g.offset + W1.T @ g.weights
        loss2.append(float(np.mean((Y1 - pred) ** 2)))
    r2 = grid[int(np.argmin(loss2))]
    return r1, r2, {"ridge_grid": tuple(grid), "stage1_loss": loss1, "stage2_loss": loss2}


def fit_kernel_iv(Y, X, Z, bandwidth_scale: float = 25.0, ridge1: Optional[float] = None,
                  ridge2: Optional[float] = None, split_fraction: float = 0.5,
                  ridge_grid: Sequence[float] = DEFAULT_RIDGE_GRID) -> KernelIVGamma:
    """Kernel IV with Gaussian kernels and median-heuristic bandwidths.

    The first ``split_fraction`` of rows trains stage 1, the rest stage 2.
    Ridge values enter as n1 * ridge1 and n2 * ridge2; a ridge left as None
    is chosen on the other half of the sample (see select_kiv_ridges).
    """
    Y = np.asarray(Y, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    Z = Z[:, None] if Z.ndim == 1 else Z
    n = Y.shape[0]
    if n < 20:
        raise MLIVError(f"kernel IV needs n >= 20, got {n}")
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split_fraction must lie in (0, 1)")
    n1 = int(round(split_fraction * n))
    bw_x = median_heuristic(X, bandwidth_scale)
    bw_z = median_heuristic(Z, bandwidth_scale)
    X1, Z1, Y1, X2, Z2, Y2 = X[:n1], Z[:n1], Y[:n1], X[n1:], Z[n1:], Y[n1:]
    tuning = {}
    if ridge1 is None or ridge2 is None:
        t1, t2, tuning = select_kiv_ridges(X1, Z1, Y1, X2, Z2, Y2, bw_x, bw_z, ridge_grid)
        ridge1 = t1 if ridge1 is None else ridge1
        ridge2 = t2 if ridge2 is None else ridge2
    g = kiv_stages(X1, Z1, X2, Z2, Y2, bw_x, bw_z, ridge1, ridge2)
    g.info.update(tuning)
    return g


def predict(gamma: GammaEstimate, points) -> np.ndarray:
    return gamma.predict(points)


def gradient(gamma: GammaEstimate, point) -> np.ndarray:
    return gamma.gradient(point)
