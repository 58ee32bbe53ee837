"""Penalized GMM for Riesz-representer coefficients.

Solves

    min_rho (M - G rho)' Omega_q (M - G rho) + 2 lam sum_j w_j |rho_j|,
    Omega_q = Omega / q,

by cyclic coordinate descent with soft-thresholding, optionally wrapped in
an active-set outer loop that adds KKT violators. Everything works on the
quadratic form H = G' Omega_q G, c = G' Omega_q M.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

log = logging.getLogger(__name__)

ADAPTIVE_WEIGHT_FLOOR = 1e-8
VARIANCE_FLOOR = 1e-12


class PGMMError(RuntimeError):
    pass


class PGMMConvergenceError(PGMMError):
    """Raised when ``max_sweeps`` is exhausted; ``fit`` holds the last iterate."""

    def __init__(self, msg, fit=None):
        super().__init__(msg)
        self.fit = fit


class SingularSystemError(PGMMError):
    pass


class DegenerateMomentError(PGMMError):
    def __init__(self, msg, indices=()):
        super().__init__(msg)
        self.indices = tuple(int(i) for i in indices)


# ---------------------------------------------------------------------------
# data containers


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """One PGMM problem. ``Omega`` may be a (q, q) matrix or a length-q diagonal."""

    G: np.ndarray
    M: np.ndarray
    Omega: Optional[np.ndarray] = None
    n: Optional[int] = None

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        M = np.asarray(self.M, dtype=float).reshape(-1)
        if G.shape[0] != M.shape[0]:
            raise ValueError(f"G has {G.shape[0]} rows but M has length {M.shape[0]}")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "M", M)
        if self.Omega is None:
            object.__setattr__(self, "Omega", np.ones(G.shape[0]))
        else:
            Om = np.asarray(self.Omega, dtype=float)
            q = G.shape[0]
            if Om.ndim == 1:
                if Om.shape != (q,) or np.any(Om <= 0):
                    raise ValueError("diagonal Omega must have q strictly positive entries")
            elif Om.shape == (q, q):
                if not np.allclose(Om, Om.T, atol=1e-12 * (1 + np.abs(Om).max())):
                    raise ValueError("Omega must be symmetric")
            else:
                raise ValueError(f"Omega shape {Om.shape} does not match q={q}")
            object.__setattr__(self, "Omega", Om)

    @property
    def q(self) -> int:
        return self.G.shape[0]

    @property
    def p(self) -> int:
        return self.G.shape[1]

    @property
    def is_diagonal(self) -> bool:
        return self.Omega.ndim == 1

    def omega_q_apply(self, v: np.ndarray) -> np.ndarray:
        if self.is_diagonal:
            w = self.Omega / self.q
            return w[:, None] * v if v.ndim == 2 else w * v
        return (self.Omega / self.q) @ v

    @cached_property
    def H(self) -> np.ndarray:
        return self.G.T @ self.omega_q_apply(self.G)

    @cached_property
    def c(self) -> np.ndarray:
        return self.G.T @ self.omega_q_apply(self.M)

    @cached_property
    def const(self) -> float:
        return float(self.M @ self.omega_q_apply(self.M))

    def with_omega(self, Omega) -> "MomentSystem":
        return MomentSystem(self.G, self.M, Omega, self.n)

    def scaled(self, kappa: float) -> "MomentSystem":
        return self.with_omega(self.Omega * kappa)


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty level and per-coordinate loadings.

    ``lam`` overrides the rate formula. With ``intercept`` set, coordinate 0
    gets its loading multiplied by ``c0``.
    """

    c1: float = 1e-2
    c0: float = 0.1
    lam: Optional[float] = None
    weights: Optional[tuple] = None
    intercept: bool = True
    rate: str = "sqrt_log"  # or "quarter": lam = c1 * n ** -0.25

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValueError("adaptive weights must be positive and finite")
            object.__setattr__(self, "weights", tuple(float(x) for x in w))
        if self.rate not in ("sqrt_log", "quarter"):
            raise ValueError(f"unknown penalty rate {self.rate!r}")

    def lambda_for(self, q: int, n: Optional[int]) -> float:
        if self.lam is not None:
            return float(self.lam)
        if n is None or n < 1:
            raise ValueError("sample size required to derive lambda from c1")
        if self.rate == "quarter":
            return self.c1 * n ** -0.25
        return self.c1 * math.sqrt(math.log(q) / n)

    def loadings(self, p: int) -> np.ndarray:
        w = np.ones(p) if self.weights is None else np.asarray(self.weights, dtype=float).copy()
        if w.shape != (p,):
            raise ValueError(f"expected {p} weights, got {w.shape}")
        if self.intercept and p > 0:
            w[0] *= self.c0
        return w

    def resolve(self, system: MomentSystem) -> tuple[float, np.ndarray]:
        return self.lambda_for(system.q, system.n), self.loadings(system.p)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-6
    max_sweeps: int = 10_000
    max_outer: Optional[int] = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass
class RieszFit:
    rho: np.ndarray
    lam: float
    weights: np.ndarray
    active_set: np.ndarray
    objective_trace: np.ndarray
    kkt_max_violation: float
    sweeps_used: int
    outer_iters_used: int = 0
    augmentations: int = 0
    frozen: tuple = ()
    notes: list = field(default_factory=list)
    omega: Optional[np.ndarray] = None

    @property
    def objective(self) -> float:
        return float(self.objective_trace[-1]) if len(self.objective_trace) else float("nan")

    def predict(self, b_matrix: np.ndarray) -> np.ndarray:
        """alpha(Z) = b(Z)' rho for a precomputed dictionary matrix."""
        return np.asarray(b_matrix) @ self.rho


# ---------------------------------------------------------------------------
# primitives


def soft_threshold(z, tau):
    """sign(z) * max(|z| - tau, 0)."""
    if np.any(np.asarray(tau) < 0):
        raise ValueError("tau must be nonnegative")
    return np.sign(z) * np.maximum(np.abs(z) - tau, 0.0)


def objective_value(system: MomentSystem, penalty: PenaltyConfig, rho) -> float:
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (system.p,):
        raise ValueError(f"rho has shape {rho.shape}, expected ({system.p},)")
    lam, w = penalty.resolve(system)
    r = system.M - system.G @ rho
    return float(r @ system.omega_q_apply(r) + 2.0 * lam * np.sum(w * np.abs(rho)))


def _objective_hc(system, thr, rho, g):
    return system.const - 2.0 * system.c @ rho + rho @ g + 2.0 * np.sum(thr * np.abs(rho))


@njit(cache=True)
def _cd_kernel(H, c, thr, rho, g, coords, tol, max_sweeps, const, trace, trace_pos):
    """Cyclic soft-threshold updates over ``coords``; ``g`` tracks H @ rho.

    Returns (sweeps, last max change, trace position).
    """
    p = rho.shape[0]
    sweeps = 0
    delta_max = np.inf
    while sweeps < max_sweeps:
        delta_max = 0.0
        # exact refresh so rounding in the running updates cannot accumulate
        for k in range(p):
            acc = 0.0
            for m in range(p):
                acc += H[k, m] * rho[m]
            g[k] = acc
        for jj in range(coords.shape[0]):
            j = coords[jj]
            B = H[j, j]
            if B <= 0.0:
                continue
            A = c[j] - g[j] + B * rho[j]
            z = A / B
            t = thr[j] / B
            if z > t:
                new = z - t
            elif z < -t:
                new = z + t
            else:
                new = 0.0
            d = new - rho[j]
            if d != 0.0:
                for k in range(p):
                    g[k] += d * H[k, j]
                rho[j] = new
                ad = abs(d)
                if ad > delta_max:
                    delta_max = ad
        sweeps += 1
        obj = const
        for k in range(p):
            obj += -2.0 * c[k] * rho[k] + rho[k] * g[k] + 2.0 * thr[k] * abs(rho[k])
        if trace_pos < trace.shape[0]:
            trace[trace_pos] = obj
            trace_pos += 1
        if delta_max < tol:
            break
    return sweeps, delta_max, trace_pos


def kkt_residuals(system: MomentSystem, lam: float, w: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Per-coordinate optimality gap of the subgradient conditions."""
    r = system.c - system.H @ rho
    thr = lam * w
    nz = rho != 0
    out = np.maximum(np.abs(r) - thr, 0.0)
    out[nz] = np.abs(r[nz] - thr[nz] * np.sign(rho[nz]))
    return out


def kkt_violations(system: MomentSystem, penalty: PenaltyConfig, rho, slack: float = 1e-8) -> dict:
    """Coordinates violating stationarity by more than ``slack`` -> {index: gap}."""
    if slack < 0:
        raise ValueError("slack must be nonnegative")
    lam, w = penalty.resolve(system)
    gaps = kkt_residuals(system, lam, w, np.asarray(rho, dtype=float))
    return {int(j): float(gaps[j]) for j in np.nonzero(gaps > slack)[0]}


def closed_form_gmm(system: MomentSystem) -> np.ndarray:
    """Unpenalized minimizer (G' Omega_q G)^{-1} G' Omega_q M."""
    H = system.H
    if system.p > system.q:
        raise SingularSystemError(f"p={system.p} exceeds q={system.q}; normal matrix is singular")
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(float).eps:
        raise SingularSystemError(f"normal matrix is singular (condition number {cond:.3g})")
    return np.linalg.solve(H, system.c)


def diagonal_weights(psi_moments) -> np.ndarray:
    """Inverse uncentered second moments of each moment column."""
    psi = np.asarray(psi_moments, dtype=float)
    if psi.ndim != 2 or psi.shape[0] < 2:
        raise ValueError("need an (n, q) matrix with n >= 2")
    sigma2 = np.mean(psi**2, axis=0)
    bad = np.nonzero(~(sigma2 >= VARIANCE_FLOOR))[0]
    if bad.size:
        raise DegenerateMomentError(f"{bad.size} moment(s) with variance below {VARIANCE_FLOOR}", bad)
    return 1.0 / sigma2


# ---------------------------------------------------------------------------
# solvers


def _null_direction(H_SS, rel=1e-10):
    """Unit null vector of a PSD block if it is numerically rank deficient, else None."""
    if H_SS.shape[0] == 1:
        return np.ones(1) if H_SS[0, 0] <= 0.0 else None
    vals, vecs = np.linalg.eigh(H_SS)
    if vals[0] > rel * max(vals[-1], 0.0):
        return None
    return vecs[:, 0]


class _Run:
    """Mutable state shared by one solve: iterate, gradient cache, trace."""

    def __init__(self, system, lam, w, config, init):
        self.system = system
        self.H = np.ascontiguousarray(system.H)
        self.c = np.ascontiguousarray(system.c)
        self.thr = lam * w
        self.lam, self.w = lam, w
        self.config = config
        p = system.p
        rho = np.zeros(p) if init is None else np.array(init, dtype=float).reshape(-1)
        if rho.shape != (p,):
            raise ValueError(f"init has shape {rho.shape}, expected ({p},)")
        diag = np.diag(self.H)
        self.frozen = tuple(int(j) for j in np.nonzero(~(diag > 0))[0])
        if self.frozen:
            rho[list(self.frozen)] = 0.0
        self.rho = rho
        self.g = self.H @ rho
        # room for one entry per sweep plus one per subspace step
        self.trace = np.empty(2 * config.max_sweeps + 2)
        self.trace[0] = _objective_hc(system, self.thr, rho, self.g)
        self.pos = 1
        self.sweeps = 0

    def sweep(self, coords, tol, budget=None):
        remaining = self.config.max_sweeps - self.sweeps
        if budget is not None:
            remaining = min(remaining, budget)
        if remaining <= 0 or len(coords) == 0:
            return 0, 0.0 if len(coords) == 0 else np.inf
        self.g = self.H @ self.rho
        n, delta, self.pos = _cd_kernel(
            self.H, self.c, self.thr, self.rho, self.g,
            np.asarray(coords, dtype=np.int64), float(tol), int(remaining),
            float(self.system.const), self.trace, self.pos,
        )
        self.sweeps += n
        return n, delta

    def objective(self):
        return float(_objective_hc(self.system, self.thr, self.rho, self.g))

    def subspace_step(self, coords) -> bool:
        """Feature-sign step on the current support within ``coords``.

        Solves H_SS x = c_S - thr_S sign(rho_S). If some sign would flip, moves
        to the first zero crossing along the segment (the objective is convex
        there and agrees with the penalized objective), drops the crossing
        coordinate from S and repeats. Kept only if the objective does not
        increase.
        """
        coords = np.asarray(coords, dtype=np.int64)
        S = coords[self.rho[coords] != 0.0]
        if S.size == 0:
            return False
        old_rho, old_g, old_obj = self.rho.copy(), self.g.copy(), self.objective()
        rho = self.rho.copy()
        sgn_all = np.sign(rho)
        while S.size:
            sgn = sgn_all[S]
            H_SS = self.H[np.ix_(S, S)]
            null = _null_direction(H_SS)
            if null is not None:
                # flat quadratic along null: slide to the first zero without raising the penalty
                v = null if float(self.thr[S] * sgn @ null) <= 0.0 else -null
                toward = v * sgn < 0.0
                if not toward.any():
                    break
                t = np.full(S.size, np.inf)
                t[toward] = np.abs(rho[S][toward] / v[toward])
                k = int(np.argmin(t))
                new = rho[S] + t[k] * v
                new[k] = 0.0
                rho[S] = new
                S = np.delete(S, k)
                continue
            rest = np.setdiff1d(coords, S)
            try:
                x = np.linalg.solve(H_SS, self.c[S] - self.thr[S] * sgn - self.H[np.ix_(S, rest)] @ rho[rest])
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(x)):
                break
            cur = rho[S]
            flips = x * sgn <= 0.0
            if not flips.any():
                rho[S] = x
                break
            t = np.full(S.size, np.inf)
            t[flips] = cur[flips] / (cur[flips] - x[flips])
            step = float(t.min())
            new = cur + step * (x - cur)
            hit = t <= step * (1.0 + 1e-12)
            new[hit] = 0.0
            rho[S] = new
            S = S[~hit]
        self.rho[:] = rho
        self.g = self.H @ self.rho
        obj = self.objective()
        if not obj <= old_obj + 1e-14 * max(1.0, abs(old_obj)):
            self.rho[:], self.g = old_rho, old_g
            return False
        if self.pos < self.trace.shape[0]:
            self.trace[self.pos] = obj
            self.pos += 1
        return True

    def descend(self, coords, tol, batch: int = 50):
        """Coordinate sweeps interleaved with subspace steps until the max change < tol."""
        delta = np.inf
        while self.sweeps < self.config.max_sweeps:
            n, delta = self.sweep(coords, tol, budget=batch)
            if delta < tol or n == 0:
                break
            self.subspace_step(coords)
        return delta

    def kkt_gap(self):
        return float(kkt_residuals(self.system, self.lam, self.w, self.rho).max(initial=0.0))

    def kkt_target(self):
        return self.config.tol * (1.0 + self.lam)

    def polish(self, coords):
        """Keep sweeping with tighter tolerances until the KKT gap meets target."""
        tol = self.config.tol
        while self.kkt_gap() > self.kkt_target() and self.sweeps < self.config.max_sweeps:
            tol = max(tol * 1e-2, 1e-300)
            n, _ = self.sweep(coords, tol)
            if n == 0:
                break

    def result(self, outer=0, augmentations=0, notes=None):
        notes = list(notes or [])
        if self.frozen:
            notes.append(f"zero-curvature coordinates frozen at 0: {list(self.frozen)}")
        gap = self.kkt_gap()
        if gap > self.kkt_target():
            notes.append(f"KKT gap {gap:.3g} above target {self.kkt_target():.3g}")
        return RieszFit(
            rho=self.rho.copy(),
            lam=self.lam,
            weights=self.w.copy(),
            active_set=np.nonzero(self.rho)[0],
            objective_trace=self.trace[: self.pos].copy(),
            kkt_max_violation=gap,
            sweeps_used=self.sweeps,
            outer_iters_used=outer,
            augmentations=augmentations,
            frozen=self.frozen,
            notes=notes,
            omega=self.system.Omega,
        )


def solve_cd(system: MomentSystem, penalty: PenaltyConfig, config: SolverConfig = SolverConfig(),
             init=None) -> RieszFit:
    """Cyclic coordinate descent over all coordinates until the max change < tol."""
    lam, w = penalty.resolve(system)
    run = _Run(system, lam, w, config, init)
    coords = np.arange(system.p)
    _, delta = run.sweep(coords, config.tol)
    if delta >= config.tol:
        raise PGMMConvergenceError(
            f"coordinate descent did not converge in {config.max_sweeps} sweeps (last change {delta:.3g})",
            run.result(),
        )
    run.polish(coords)
    return run.result()


def solve_active_set(system: MomentSystem, penalty: PenaltyConfig, config: SolverConfig = SolverConfig(),
                     init=None) -> RieszFit:
    """Full pass, then inner descent on the active set plus KKT augmentation."""
    lam, w = penalty.resolve(system)
    run = _Run(system, lam, w, config, init)
    p = system.p
    max_outer = p if config.max_outer is None else config.max_outer
    run.sweep(np.arange(p), config.tol, budget=1)
    active = np.zeros(p, dtype=bool)
    active[np.nonzero(run.rho)[0]] = True
    outer = augment = 0
    tol = config.tol
    while True:
        outer += 1
        idx = np.nonzero(active)[0]
        if idx.size:
            delta = run.descend(idx, tol)
            if delta >= tol:
                raise PGMMConvergenceError(
                    f"active-set inner loop did not converge in {config.max_sweeps} sweeps",
                    run.result(outer, augment),
                )
        r = run.c - run.H @ run.rho
        viol = (~active) & (np.abs(r) > run.thr)
        if run.frozen:
            viol[list(run.frozen)] = False
        if viol.any():
            if augment >= max_outer:
                raise PGMMConvergenceError(f"active set still growing after {max_outer} augmentations",
                                           run.result(outer, augment))
            active |= viol
            augment += 1
            continue
        if run.kkt_gap() > run.kkt_target() and run.sweeps < config.max_sweeps:
            tol = max(tol * 1e-2, 1e-300)
            continue
        break
    return run.result(outer, augment)


SOLVERS = {"cd": solve_cd, "active_set": solve_active_set}


def _solver(name):
    try:
        return SOLVERS[name]
    except KeyError:
        raise ValueError(f"unknown solver {name!r}; choose from {sorted(SOLVERS)}") from None


def adaptive_solve(system: MomentSystem, penalty: PenaltyConfig, config: SolverConfig = SolverConfig(),
                   solver: str = "active_set", pilot=None, force_unit_weights: bool = False) -> RieszFit:
    """Adaptive-lasso refit with loadings 1 / max(|pilot_j|, floor).

    Without ``pilot`` the pilot is the plain fit under unit loadings.
    """
    solve = _solver(solver)
    if pilot is None:
        pilot = solve(system, replace(penalty, weights=None), config).rho
    pilot = np.asarray(pilot, dtype=float)
    if force_unit_weights:
        w = np.ones(system.p)
    else:
        w = 1.0 / np.maximum(np.abs(pilot), ADAPTIVE_WEIGHT_FLOOR)
    fit = solve(system, replace(penalty, weights=tuple(w)), config, init=pilot)
    fit.notes.append("adaptive refit")
    return fit


# ---------------------------------------------------------------------------
# observation-level moment data


@dataclass(frozen=True, eq=False)
class MomentData:
    """Per-observation ingredients of the Riesz moment conditions.

    psi_ij(rho) = m_obs[i, j] - d_obs[i, j] * b_obs[i] @ rho
    """

    m_obs: np.ndarray  # (n, q): m(W_i, d_j) or its Gateaux counterpart
    d_obs: np.ndarray  # (n, q): d_j(X_i)
    b_obs: np.ndarray  # (n, p): b(Z_i)

    def __post_init__(self):
        n = self.d_obs.shape[0]
        if self.m_obs.shape != self.d_obs.shape or self.b_obs.shape[0] != n:
            raise ValueError("m_obs, d_obs must be (n, q) and b_obs (n, p)")

    @property
    def n(self) -> int:
        return self.d_obs.shape[0]

    def subset(self, idx) -> "MomentData":
        idx = np.asarray(idx)
        return MomentData(self.m_obs[idx], self.d_obs[idx], self.b_obs[idx])

    def system(self, Omega=None) -> MomentSystem:
        n = self.n
        if n == 0:
            raise ValueError("empty moment data")
        G = self.d_obs.T @ self.b_obs / n
        M = self.m_obs.mean(axis=0)
        return MomentSystem(G, M, Omega, n)

    def psi(self, rho) -> np.ndarray:
        return self.m_obs - self.d_obs * (self.b_obs @ rho)[:, None]


def two_stage_solve(data: MomentData, penalty: PenaltyConfig, config: SolverConfig = SolverConfig(),
                    solver: str = "active_set", adaptive: bool = False) -> RieszFit:
    """Identity-weight pilot, then a diagonal-weight refit started at the pilot.

    With ``adaptive`` the refit also uses loadings 1/|pilot_j|.
    """
    solve = _solver(solver)
    stage1 = solve(data.system(), replace(penalty, weights=None), config)
    try:
        omega = diagonal_weights(data.psi(stage1.rho))
    except DegenerateMomentError as err:
        stage1.notes.append(f"stage-2 skipped, degenerate moments {list(err.indices)}; returning stage-1 fit")
        log.warning("two-stage PGMM fell back to identity weights: %s", err)
        return stage1
    system2 = data.system(omega)
    if adaptive:
        fit = adaptive_solve(system2, penalty, config, solver=solver, pilot=stage1.rho)
    else:
        fit = solve(system2, penalty, config, init=stage1.rho)
    fit.notes.append("two-stage diagonal weighting")
    return fit


@dataclass
class CVResult:
    c1: float
    grid: tuple
    curve: np.ndarray
    failures: dict


def cross_validate_c1(data: MomentData, folds: Sequence[np.ndarray], grid: Sequence[float],
                      penalty: PenaltyConfig = PenaltyConfig(), config: SolverConfig = SolverConfig(),
                      fit: Optional[Callable[[MomentData, PenaltyConfig, SolverConfig], RieszFit]] = None) -> CVResult:
    """K-fold selection of c1 by held-out GMM objective.

    The held-out weight is the diagonal weight of the held-out moments at the
    training fit (identity if those are degenerate). Ties go to the first
    grid entry.
    """
    if len(folds) < 2:
        raise ValueError("need at least two folds")
    if len(grid) == 0:
        raise ValueError("empty c1 grid")
    if fit is None:
        def fit(d, pen, cfg):
            return two_stage_solve(d, pen, cfg)
    n = data.n
    curve = np.full(len(grid), np.inf)
    failures = {}
    for g_idx, c1 in enumerate(grid):
        total = 0.0
        try:
            for k, test in enumerate(folds):
                test = np.asarray(test)
                train = np.setdiff1d(np.arange(n), test)
                tr, te = data.subset(train), data.subset(test)
                pen = replace(penalty, c1=float(c1), lam=None)
                rho = fit(tr, pen, config).rho
                try:
                    om = diagonal_weights(te.psi(rho))
                except DegenerateMomentError:
                    om = None
                sys_k = te.system(om)
                r = sys_k.M - sys_k.G @ rho
                total += float(r @ sys_k.omega_q_apply(r))
        except PGMMError as err:
            failures[g_idx] = str(err)
            continue
        curve[g_idx] = total
    if not np.isfinite(curve).any():
        raise PGMMError(f"every c1 candidate failed: {failures}")
    best = int(np.argmin(curve))
    return CVResult(c1=float(grid[best]), grid=tuple(float(x) for x in grid), curve=curve, failures=failures)
