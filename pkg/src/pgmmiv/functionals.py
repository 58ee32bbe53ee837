"""Target functionals m(W, gamma), their Gateaux derivatives and the PGMM moment builders.

A functional works on a whole data container at once: ``evaluate`` returns
one value per observation and ``gateaux`` returns an (n, q) array of
directional derivatives, one column per direction. Directions may be a
:class:`~pgmmiv.basis.Dictionary` (all of its functions) or a single
fitted function with ``predict``/``gradient``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .basis import Dictionary
from .demand import Market, MarketPanel, OMEGA_BLOCK, omega_price_share_jacobians

SIMPLEX_TOL = 1e-10
COND_LIMIT = 1e12


class FunctionalError(ValueError):
    pass


class SingularMarketError(FunctionalError):
    def __init__(self, msg, market_ids=()):
        super().__init__(msg)
        self.market_ids = tuple(market_ids)


@dataclass(eq=False)
class IVData:
    """Observations (Y, X, Z) for the nonparametric IV model."""

    Y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1)
        self.X = np.asarray(self.X, dtype=float)
        self.Z = np.asarray(self.Z, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.Z.ndim == 1:
            self.Z = self.Z[:, None]
        if not (self.X.shape[0] == self.Z.shape[0] == self.Y.shape[0]):
            raise ValueError("Y, X, Z must have the same number of rows")

    def __len__(self):
        return self.Y.shape[0]

    def take(self, idx) -> "IVData":
        idx = np.asarray(idx, dtype=int)
        return IVData(self.Y[idx], self.X[idx], self.Z[idx])


# ---------------------------------------------------------------------------
# directions


def direction_values(direction, points) -> np.ndarray:
    """(n, q) values of a dictionary or a single function (q = 1)."""
    if isinstance(direction, Dictionary):
        return direction.matrix(points)
    return np.asarray(direction.predict(points), dtype=float).reshape(-1, 1)


def direction_jacobian(direction, points) -> np.ndarray:
    """(n, q, dim) derivatives of a dictionary or a single function."""
    if isinstance(direction, Dictionary):
        return direction.jacobian(points)
    g = np.asarray(direction.gradient(points), dtype=float)
    return g.reshape(g.shape[0], 1, -1)


@dataclass(eq=False)
class FunctionalSpec:
    """A target functional with per-observation value and Gateaux derivative.

    ``gateaux(data, gamma, direction)`` returns (n, q). Linear specs ignore
    ``gamma`` there, and their gateaux at d_j equals evaluate at d_j.
    """

    name: str
    is_linear: bool
    evaluate: Callable
    gateaux: Callable
    info: dict = field(default_factory=dict)

    def __call__(self, data, gamma):
        return self.evaluate(data, gamma)


def avg_derivative_spec(target_coord: int, weight: Optional[Callable] = None) -> FunctionalSpec:
    """Weighted average derivative of gamma with respect to X[:, target_coord]."""
    if target_coord < 0:
        raise FunctionalError("coordinate must be non-negative")

    def _weights(X):
        return np.ones(X.shape[0]) if weight is None else np.asarray(weight(X), dtype=float).reshape(-1)

    def _check(X):
        if target_coord >= X.shape[1]:
            raise FunctionalError(f"coordinate {target_coord} out of range for X with {X.shape[1]} columns")

    def evaluate(data, gamma):
        _check(data.X)
        return _weights(data.X) * np.asarray(gamma.gradient(data.X))[:, target_coord]

    def gateaux(data, gamma, direction):
        _check(data.X)
        return _weights(data.X)[:, None] * direction_jacobian(direction, data.X)[:, :, target_coord]

    return FunctionalSpec("avg_derivative", True, evaluate, gateaux, {"coord": target_coord})


def policy_effect_spec(transform: Callable) -> FunctionalSpec:
    """Average effect gamma(g(X)) - gamma(X) of the counterfactual map g (row-wise on X)."""

    def _moved(X):
        G = np.asarray(transform(X), dtype=float)
        if G.shape != X.shape:
            raise FunctionalError(f"transform changed the shape {X.shape} -> {G.shape}")
        return G

    def evaluate(data, gamma):
        return np.asarray(gamma.predict(_moved(data.X))) - np.asarray(gamma.predict(data.X))

    def gateaux(data, gamma, direction):
        return direction_values(direction, _moved(data.X)) - direction_values(direction, data.X)

    return FunctionalSpec("policy_effect", True, evaluate, gateaux)


def build_G_hat(d_dict: Dictionary, b_dict: Dictionary, X, Z) -> np.ndarray:
    """(1/n) sum_i d(X_i) b(Z_i)' -> (|d|, |b|)."""
    D = d_dict.matrix(X)
    B = b_dict.matrix(Z)
    if D.shape[0] == 0:
        raise FunctionalError("empty data")
    if D.shape[0] != B.shape[0]:
        raise FunctionalError("X and Z row counts differ")
    return D.T @ B / D.shape[0]


def build_M_linear(spec: FunctionalSpec, d_dict: Dictionary, data) -> np.ndarray:
    if not spec.is_linear:
        raise FunctionalError(f"{spec.name} is nonlinear; use the double cross-fitted builder")
    if len(data) == 0:
        raise FunctionalError("empty data")
    return spec.gateaux(data, None, d_dict).mean(axis=0)


# ---------------------------------------------------------------------------
# demand elasticities


def _check_shares(shares):
    s = np.asarray(shares, dtype=float)
    if np.any(s <= 0):
        raise FunctionalError("shares must be strictly positive")
    if np.any(np.abs(s.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise FunctionalError("shares do not sum to one")
    return s


def log_share_jacobian(shares) -> np.ndarray:
    """d log(s_j / s_0) / d s_k for inside goods, with s_0 = 1 - sum of inside shares.

    Accepts (J+1,) or stacked (T, J+1) share vectors, outside good first.
    """
    s = _check_shares(shares)
    inside = s[..., 1:]
    J = inside.shape[-1]
    L = np.broadcast_to((1.0 / s[..., :1])[..., None], inside.shape[:-1] + (J, J)).copy()
    idx = np.arange(J)
    L[..., idx, idx] += 1.0 / inside
    return L


def _as_panel(market) -> MarketPanel:
    if isinstance(market, MarketPanel):
        return market
    if isinstance(market, Market):
        return MarketPanel.from_markets([market])
    raise TypeError(f"expected Market or MarketPanel, got {type(market).__name__}")


def _check_layout(panel: MarketPanel, fn_dim: int):
    if fn_dim != panel.J * OMEGA_BLOCK:
        raise FunctionalError(f"function takes {fn_dim} inputs but the state layout has {panel.J * OMEGA_BLOCK}")


def _chain(grad, Jp, Js):
    """grad (T, J, q, dim) -> price and share jacobians (T, q, J, J), row j = product j."""
    Zp = np.einsum("tjqd,jdk->tqjk", grad, Jp)
    Zs = np.einsum("tjqd,jdk->tqjk", grad, Js)
    return Zp, Zs


def _direction_grad(panel: MarketPanel, omega, direction):
    T, J, dim = omega.shape
    g = direction_jacobian(direction, omega.reshape(T * J, dim))
    _check_layout(panel, g.shape[2])
    return g.reshape(T, J, g.shape[1], dim)


def gamma_jacobians(gamma, market) -> tuple[np.ndarray, np.ndarray]:
    """Price and share derivatives of gamma(omega_jt) for every product, chained through omega.

    For a single Market returns two (J, J) matrices; for a MarketPanel (T, J, J).
    """
    panel = _as_panel(market)
    omega = panel.omega()
    Jp, Js = omega_price_share_jacobians(panel.J)
    Zp, Zs = _chain(_direction_grad(panel, omega, gamma), Jp, Js)
    Gp, Gs = Zp[:, 0], Zs[:, 0]
    if isinstance(market, Market):
        return Gp[0], Gs[0]
    return Gp, Gs


@dataclass(eq=False)
class IFTParts:
    """Per-market pieces of the share-price derivative, singular markets flagged."""

    A_inv: np.ndarray  # (T, J, J), NaN for singular markets
    Gp: np.ndarray
    Gs: np.ndarray
    singular: np.ndarray  # (T,) bool
    cond: np.ndarray

    @property
    def share_price(self) -> np.ndarray:
        """ds/dp = A^{-1} Gp, (T, J, J)."""
        return self.A_inv @ self.Gp


def ift_parts(panel: MarketPanel, gamma, cond_limit: float = COND_LIMIT) -> IFTParts:
    Gp, Gs = gamma_jacobians(gamma, panel)
    A = log_share_jacobian(panel.shares) - Gs
    cond = np.linalg.cond(A)
    singular = ~(cond <= cond_limit)
    A_inv = np.full_like(A, np.nan)
    ok = ~singular
    if ok.any():
        A_inv[ok] = np.linalg.inv(A[ok])
    return IFTParts(A_inv, Gp, Gs, singular, cond)


def _raise_singular(panel, parts):
    if parts.singular.any():
        ids = panel.market_ids[parts.singular].tolist()
        raise SingularMarketError(f"share jacobian system is singular (cond > {COND_LIMIT:g}) in markets {ids}", ids)


def elasticity_matrix(market, gamma) -> np.ndarray:
    """eps_jk = (p_k / s_j) [A^{-1} Gp]_jk with A = L - Gs.

    Raises SingularMarketError naming the market(s) where A is ill-conditioned.
    """
    panel = _as_panel(market)
    parts = ift_parts(panel, gamma)
    _raise_singular(panel, parts)
    eps = parts.share_price * panel.prices[:, None, :] / panel.shares[:, 1:, None]
    return eps[0] if isinstance(market, Market) else eps


def _elasticity_values(panel, parts, j, k):
    return (panel.prices[:, k] / panel.shares[:, 1 + j]) * parts.share_price[:, j, k]


def _elasticity_gateaux(panel, parts, direction, j, k):
    omega = panel.omega()
    Jp, Js = omega_price_share_jacobians(panel.J)
    Zp, Zs = _chain(_direction_grad(panel, omega, direction), Jp, Js)
    u = parts.A_inv[:, j, :]  # row j of A^{-1}
    v = parts.share_price[:, :, k]  # column k of A^{-1} Gp
    first = np.einsum("tm,tqm->tq", u, Zp[:, :, :, k])
    second = np.einsum("tm,tqmr,tr->tq", u, Zs, v)
    scale = panel.prices[:, k] / panel.shares[:, 1 + j]
    return scale[:, None] * (first + second)


def _target(J, target):
    if isinstance(target, (int, np.integer)):
        target = (target, target)
    j, k = int(target[0]), int(target[1])
    if not (1 <= j <= J and 1 <= k <= J):
        raise FunctionalError(f"target {target} out of range 1..{J}")
    return j - 1, k - 1


def elasticity_gateaux(market, gamma, direction, target=1):
    """Directional derivative of eps_jk at gamma along the direction(s).

    (p_k / s_j) [(A^{-1} Zp)_jk + (A^{-1} Zs A^{-1} Gp)_jk], where Zp and Zs
    are the chain-rule jacobians of the direction. A single Market and a
    single-function direction give a float; a dictionary gives one value per
    function; a MarketPanel adds a leading market axis.
    """
    panel = _as_panel(market)
    j, k = _target(panel.J, target)
    parts = ift_parts(panel, gamma)
    _raise_singular(panel, parts)
    out = _elasticity_gateaux(panel, parts, direction, j, k)
    if not isinstance(direction, Dictionary):
        out = out[:, 0]
    return out[0] if isinstance(market, Market) else out


def logit_elasticity_oracle(beta_p, price, share):
    """Closed-form logit own-price elasticity beta_p * p * (1 - s)."""
    s = np.asarray(share, dtype=float)
    if np.any((s < 0) | (s >= 1)):
        raise FunctionalError("share must lie in [0, 1)")
    out = beta_p * np.asarray(price, dtype=float) * (1.0 - s)
    return float(out) if out.ndim == 0 else out


def elasticity_spec(product: int = 1, target=None) -> FunctionalSpec:
    """Own-price elasticity of ``product`` (1-based) as a per-market functional.

    Works on a MarketPanel; markets with a singular share system get NaN in
    both ``evaluate`` and ``gateaux`` so callers can drop them consistently.
    """
    tgt = (product, product) if target is None else target

    def evaluate(panel, gamma):
        j, k = _target(panel.J, tgt)
        parts = ift_parts(panel, gamma)
        return _elasticity_values(panel, parts, j, k)

    def gateaux(panel, gamma, direction):
        j, k = _target(panel.J, tgt)
        parts = ift_parts(panel, gamma)
        return _elasticity_gateaux(panel, parts, direction, j, k)

    return FunctionalSpec("own_price_elasticity", False, evaluate, gateaux, {"product": product, "target": tgt})
