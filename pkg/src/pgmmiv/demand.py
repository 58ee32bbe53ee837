"""Logit market simulation and the symmetric state/instrument construction.

Layout conventions (shared with the elasticity functional):

* products are 1..J, the outside good is 0 with zero price, characteristics
  and cost;
* the state of product j is one block per rival k in (0, 1, ..., J) \\ {j},
  ascending, each block ``(s_k, p_j - p_k, x2_j - x2_k)``;
* instruments use the same rival order with blocks
  ``(x1_j - x1_k, x2_j - x2_k, c_j - c_k)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .mliv import GammaEstimate

N_X2 = 3
OMEGA_BLOCK = 2 + N_X2
Z_BLOCK = 1 + N_X2 + 1


@dataclass(frozen=True)
class LogitParams:
    beta_p: float = -2.0
    beta_x: tuple = (1.0, -0.5, 0.5, 1.0)
    xi_mean: float = 1.0
    xi_sd: float = 0.15


@dataclass(eq=False)
class Market:
    J: int
    shares: np.ndarray  # (J+1,), outside good first
    prices: np.ndarray
    x1: np.ndarray
    x2: np.ndarray  # (J, 3)
    cost: np.ndarray
    xi: np.ndarray
    seed: Optional[int] = None
    t: Optional[int] = None


@dataclass(eq=False)
class OmegaState:
    product_index: int
    rivals: tuple
    flat: np.ndarray

    @property
    def blocks(self) -> np.ndarray:
        return self.flat.reshape(len(self.rivals), OMEGA_BLOCK)


def logit_shares(delta: np.ndarray) -> np.ndarray:
    """Inside shares plus outside share (first) for mean utilities ``delta`` (..., J)."""
    top = np.max(np.maximum(delta, 0.0), axis=-1, keepdims=True)
    e = np.exp(delta - top)
    e0 = np.exp(-top)
    denom = e0 + e.sum(axis=-1, keepdims=True)
    return np.concatenate([e0 / denom, e / denom], axis=-1)


def market_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(t)])


def simulate_market(J: int, params: LogitParams, seed: int, t: int) -> Market:
    rng = market_rng(seed, t)
    x1 = rng.uniform(0.0, 1.0, J)
    x2 = rng.uniform(0.0, 1.0, (J, N_X2))
    xi = rng.normal(params.xi_mean, params.xi_sd, J)
    cost = rng.uniform(0.0, 1.0, J)
    e = rng.uniform(0.0, 0.1, J)
    prices = 0.5 * np.abs(1.0 + x1 + x2.sum(axis=1) + xi + cost + e)
    bx = np.asarray(params.beta_x, dtype=float)
    delta = params.beta_p * prices + x1 * bx[0] + x2 @ bx[1:] + xi
    return Market(J=J, shares=logit_shares(delta), prices=prices, x1=x1, x2=x2,
                  cost=cost, xi=xi, seed=seed, t=t)


def simulate_logit_markets(J: int, T: int, params: LogitParams = LogitParams(), seed: int = 0,
                           start: int = 0) -> list[Market]:
    """T independent logit markets; market t draws (x1, x2, xi, c, e) from its own stream."""
    if J < 1 or T < 1:
        raise ValueError("J and T must be positive")
    return [simulate_market(J, params, seed, t) for t in range(start, start + T)]


def _check_product(J, j):
    if not 1 <= j <= J:
        raise IndexError(f"product index {j} out of range 1..{J}")


def rivals_of(J: int, j: int) -> tuple:
    return tuple(k for k in range(J + 1) if k != j)


def build_omega(market: Market, j: int) -> OmegaState:
    _check_product(market.J, j)
    p = np.concatenate([[0.0], market.prices])
    x2 = np.vstack([np.zeros(N_X2), market.x2])
    rivals = rivals_of(market.J, j)
    flat = np.concatenate([
        np.concatenate([[market.shares[k], p[j] - p[k]], x2[j] - x2[k]]) for k in rivals
    ])
    return OmegaState(product_index=j, rivals=rivals, flat=flat)


def build_instruments(market: Market, j: int) -> np.ndarray:
    _check_product(market.J, j)
    x1 = np.concatenate([[0.0], market.x1])
    x2 = np.vstack([np.zeros(N_X2), market.x2])
    c = np.concatenate([[0.0], market.cost])
    return np.concatenate([
        np.concatenate([[x1[j] - x1[k]], x2[j] - x2[k], [c[j] - c[k]]]) for k in rivals_of(market.J, j)
    ])


def build_outcome(market: Market, j: int) -> float:
    _check_product(market.J, j)
    s_j, s_0 = market.shares[j], market.shares[0]
    if not (s_j > 0 and s_0 > 0):
        raise ValueError("shares must be strictly positive")
    return float(np.log(s_j / s_0) - market.x1[j - 1])


def outside_state(omega: OmegaState) -> np.ndarray:
    """State of the outside good, blocks (s_k, -p_k, -x2_k) for k = 1..J."""
    blocks = omega.blocks
    j = omega.product_index
    pos = {k: i for i, k in enumerate(omega.rivals)}
    own = blocks[pos[0], 1:]
    s_j = 1.0 - blocks[:, 0].sum()
    J = len(omega.rivals)
    out = []
    for k in range(1, J + 1):
        if k == j:
            out.append(np.concatenate([[s_j], -own]))
        else:
            b = blocks[pos[k]]
            out.append(np.concatenate([[b[0]], b[1:] - own]))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# panel (vectorized) view


@dataclass(eq=False)
class MarketPanel:
    """Stacked markets; arrays are indexed [t, j-1]."""

    shares: np.ndarray  # (T, J+1)
    prices: np.ndarray  # (T, J)
    x1: np.ndarray
    x2: np.ndarray  # (T, J, 3)
    cost: np.ndarray
    xi: np.ndarray
    market_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.market_ids is None:
            self.market_ids = np.arange(self.shares.shape[0])

    @property
    def T(self) -> int:
        return self.shares.shape[0]

    @property
    def J(self) -> int:
        return self.prices.shape[1]

    def __len__(self):
        return self.T

    @classmethod
    def from_markets(cls, markets: Sequence[Market]) -> "MarketPanel":
        ids = [m.t if m.t is not None else i for i, m in enumerate(markets)]
        return cls(
            shares=np.stack([m.shares for m in markets]),
            prices=np.stack([m.prices for m in markets]),
            x1=np.stack([m.x1 for m in markets]),
            x2=np.stack([m.x2 for m in markets]),
            cost=np.stack([m.cost for m in markets]),
            xi=np.stack([m.xi for m in markets]),
            market_ids=np.asarray(ids),
        )

    def take(self, idx) -> "MarketPanel":
        idx = np.asarray(idx, dtype=int)
        return MarketPanel(self.shares[idx], self.prices[idx], self.x1[idx], self.x2[idx],
                           self.cost[idx], self.xi[idx], self.market_ids[idx])

    def markets(self) -> list[Market]:
        return [Market(J=self.J, shares=self.shares[t], prices=self.prices[t], x1=self.x1[t],
                       x2=self.x2[t], cost=self.cost[t], xi=self.xi[t], t=int(self.market_ids[t]))
                for t in range(self.T)]

    # -- state, instruments, outcomes for every (t, j) --

    def omega(self) -> np.ndarray:
        """(T, J, J * 5) state vectors."""
        T, J = self.T, self.J
        p = np.concatenate([np.zeros((T, 1)), self.prices], axis=1)
        x2 = np.concatenate([np.zeros((T, 1, N_X2)), self.x2], axis=1)
        out = np.empty((T, J, J * OMEGA_BLOCK))
        for j in range(1, J + 1):
            rv = list(rivals_of(J, j))
            blk = np.empty((T, J, OMEGA_BLOCK))
            blk[:, :, 0] = self.shares[:, rv]
            blk[:, :, 1] = p[:, [j]] - p[:, rv]
            blk[:, :, 2:] = x2[:, [j], :] - x2[:, rv, :]
            out[:, j - 1] = blk.reshape(T, -1)
        return out

    def instruments(self) -> np.ndarray:
        T, J = self.T, self.J
        x1 = np.concatenate([np.zeros((T, 1)), self.x1], axis=1)
        x2 = np.concatenate([np.zeros((T, 1, N_X2)), self.x2], axis=1)
        c = np.concatenate([np.zeros((T, 1)), self.cost], axis=1)
        out = np.empty((T, J, J * Z_BLOCK))
        for j in range(1, J + 1):
            rv = list(rivals_of(J, j))
            blk = np.empty((T, J, Z_BLOCK))
            blk[:, :, 0] = x1[:, [j]] - x1[:, rv]
            blk[:, :, 1:1 + N_X2] = x2[:, [j], :] - x2[:, rv, :]
            blk[:, :, -1] = c[:, [j]] - c[:, rv]
            out[:, j - 1] = blk.reshape(T, -1)
        return out

    def outcomes(self) -> np.ndarray:
        s = self.shares
        if np.any(s <= 0):
            raise ValueError("shares must be strictly positive")
        return np.log(s[:, 1:] / s[:, [0]]) - self.x1

    def pooled(self):
        """(y, omega, z) stacked over markets then products, for fitting gamma."""
        d_w = self.J * OMEGA_BLOCK
        d_z = self.J * Z_BLOCK
        return (self.outcomes().reshape(-1), self.omega().reshape(-1, d_w),
                self.instruments().reshape(-1, d_z))


def omega_price_share_jacobians(J: int) -> tuple[np.ndarray, np.ndarray]:
    """d omega_j / d p and d omega_j / d s for inside goods, each (J, J*5, J).

    Shares are differentiated with s_0 = 1 - sum_m s_m, so the outside-good
    share entry moves by -1 with every inside share.
    """
    dim = J * OMEGA_BLOCK
    Jp = np.zeros((J, dim, J))
    Js = np.zeros((J, dim, J))
    for j in range(1, J + 1):
        for b, k in enumerate(rivals_of(J, j)):
            s_pos, p_pos = b * OMEGA_BLOCK, b * OMEGA_BLOCK + 1
            Jp[j - 1, p_pos, j - 1] += 1.0
            if k == 0:
                Js[j - 1, s_pos, :] = -1.0
            else:
                Jp[j - 1, p_pos, k - 1] -= 1.0
                Js[j - 1, s_pos, k - 1] = 1.0
    return Jp, Js


@dataclass(eq=False)
class LogitGamma(GammaEstimate):
    """gamma(omega) = beta_p p_j + x2_j' beta_x2, read off the outside-good block."""

    J: int
    beta_p: float = -2.0
    beta_x2: tuple = (-0.5, 0.5, 1.0)
    kind: str = "logit"

    @property
    def input_dim(self) -> int:
        return self.J * OMEGA_BLOCK

    def _coef(self):
        w = np.zeros(self.input_dim)
        w[1] = self.beta_p
        w[2:OMEGA_BLOCK] = self.beta_x2
        return w

    def predict(self, points):
        P = np.asarray(points, dtype=float)
        return P @ self._coef()

    def gradient(self, points):
        P = np.asarray(points, dtype=float)
        return np.broadcast_to(self._coef(), P.shape).copy()

    @classmethod
    def from_params(cls, J: int, params: LogitParams = LogitParams()) -> "LogitGamma":
        return cls(J=J, beta_p=params.beta_p, beta_x2=tuple(params.beta_x[1:]))


# ---------------------------------------------------------------------------
# CSV (one row per product-market)

CSV_FIELDS = ["market", "product", "share", "outside_share", "price", "x1", "x2_1", "x2_2", "x2_3", "cost", "xi"]


def write_markets_csv(markets: Iterable[Market], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for i, m in enumerate(markets):
            mid = m.t if m.t is not None else i
            for j in range(m.J):
                row = [mid, j + 1, m.shares[j + 1], m.shares[0], m.prices[j], m.x1[j], *m.x2[j],
                       m.cost[j], m.xi[j]]
                w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])


def read_markets_csv(path) -> list[Market]:
    rows: dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_FIELDS[:-1]) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"markets CSV missing columns: {sorted(missing)}")
        for line, r in enumerate(reader, start=2):
            try:
                rows.setdefault(int(r["market"]), []).append(r)
            except (TypeError, ValueError) as err:
                raise ValueError(f"line {line}: bad market id {r.get('market')!r}") from err
    out = []
    for mid in sorted(rows):
        rs = sorted(rows[mid], key=lambda r: int(r["product"]))
        J = len(rs)
        if [int(r["product"]) for r in rs] != list(range(1, J + 1)):
            raise ValueError(f"market {mid}: products must be numbered 1..J")
        f = lambda key: np.array([float(r[key]) for r in rs])
        s0 = float(rs[0]["outside_share"])
        xi = f("xi") if "xi" in rs[0] and rs[0]["xi"] not in (None, "") else np.full(J, np.nan)
        out.append(Market(J=J, shares=np.concatenate([[s0], f("share")]), prices=f("price"), x1=f("x1"),
                          x2=np.column_stack([f("x2_1"), f("x2_2"), f("x2_3")]), cost=f("cost"),
                          xi=xi, t=mid))
    return out
