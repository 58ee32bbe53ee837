"""Basis-function dictionaries with analytic derivatives.

Two families are provided: plain polynomial dictionaries over the raw
coordinates, and symmetric empirical-moment (EM) dictionaries for demand
states laid out as rival blocks ``(s_k, delta_k1, ..., delta_kD)``.
Every dictionary puts the constant function first.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class DictionaryError(ValueError):
    pass


def _as_points(points, input_dim):
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[None, :]
    if P.ndim != 2 or P.shape[1] != input_dim:
        raise DictionaryError(
            f"expected points with {input_dim} coordinates, got shape {np.shape(points)}"
        )
    return P


class Dictionary:
    """Ordered set of basis functions of ``input_dim`` real inputs.

    Subclasses implement :meth:`matrix` and :meth:`jacobian`; the
    single-point helpers are thin wrappers around them.
    """

    input_dim: int
    functions: tuple

    @property
    def size(self) -> int:
        return len(self.functions)

    def __len__(self) -> int:
        return self.size

    def matrix(self, points) -> np.ndarray:
        """Evaluate all functions at each row of ``points`` -> (n, size)."""
        raise NotImplementedError

    def jacobian(self, points) -> np.ndarray:
        """Analytic derivatives -> (n, size, input_dim)."""
        raise NotImplementedError

    def evaluate(self, point) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        if point.ndim != 1:
            raise DictionaryError("evaluate takes a single point; use matrix() for batches")
        return self.matrix(point)[0]

    def partial(self, point, coord: int) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        if point.ndim != 1:
            raise DictionaryError("partial takes a single point")
        if not 0 <= coord < self.input_dim:
            raise DictionaryError(f"coordinate {coord} out of range for input_dim={self.input_dim}")
        return self.jacobian(point)[0, :, coord]

    def partial_matrix(self, points, coord: int) -> np.ndarray:
        if not 0 <= coord < self.input_dim:
            raise DictionaryError(f"coordinate {coord} out of range for input_dim={self.input_dim}")
        return self.jacobian(points)[:, :, coord]


@dataclass(frozen=True, eq=False)
class PolyDictionary(Dictionary):
    """Monomials x^e for the exponent rows in ``exponents``."""

    input_dim: int
    exponents: np.ndarray = field(repr=False)

    @property
    def functions(self) -> tuple:
        return tuple(tuple(int(a) for a in row) for row in self.exponents)

    def matrix(self, points) -> np.ndarray:
        P = _as_points(points, self.input_dim)
        E = self.exponents
        out = np.ones((P.shape[0], E.shape[0]))
        for c in range(self.input_dim):
            col = P[:, c][:, None]
            used = np.nonzero(E[:, c])[0]
            if used.size:
                out[:, used] *= col ** E[used, c][None, :]
        return out

    def jacobian(self, points) -> np.ndarray:
        P = _as_points(points, self.input_dim)
        E = self.exponents
        n, q, d = P.shape[0], E.shape[0], self.input_dim
        # powers[c][:, k] = x_c ** E[k, c]
        powers = [P[:, c][:, None] ** E[:, c][None, :] for c in range(d)]
        J = np.zeros((n, q, d))
        for c in range(d):
            live = np.nonzero(E[:, c])[0]
            if live.size == 0:
                continue
            term = E[live, c][None, :] * P[:, c][:, None] ** (E[live, c] - 1)[None, :]
            for e in range(d):
                if e != c:
                    term = term * powers[e][:, live]
            J[:, live, c] = term
        return J

    def __eq__(self, other):
        return (
            isinstance(other, PolyDictionary)
            and self.input_dim == other.input_dim
            and np.array_equal(self.exponents, other.exponents)
        )

    __hash__ = None


def _poly_exponents(dim: int, degree: int, include_interactions: bool) -> np.ndarray:
    rows = [np.zeros(dim, dtype=np.int64)]
    for c in range(dim):
        for a in range(1, degree + 1):
            e = np.zeros(dim, dtype=np.int64)
            e[c] = a
            rows.append(e)
    if include_interactions:
        for c, e_ in itertools.combinations(range(dim), 2):
            for a in range(1, degree):
                for b in range(1, degree - a + 1):
                    e = np.zeros(dim, dtype=np.int64)
                    e[c], e[e_] = a, b
                    rows.append(e)
    return np.array(rows, dtype=np.int64)


def build_poly_dictionary(dim: int, degree: int, include_interactions: bool = False) -> PolyDictionary:
    """Constant, pure powers up to ``degree`` and optionally pairwise products.

    Ordering: the constant, then ``x_c, x_c^2, ...`` coordinate by
    coordinate, then pairwise products ``x_c^a x_e^b`` (c < e, a + b <= degree)
    sorted by ``(c, e, a, b)``.
    """
    if dim < 1 or degree < 1:
        raise DictionaryError(f"need dim >= 1 and degree >= 1, got dim={dim}, degree={degree}")
    return PolyDictionary(input_dim=int(dim), exponents=_poly_exponents(dim, degree, include_interactions))


def em_moment_indices(dim_delta: int, min_order: int, max_order: int) -> list[tuple[int, ...]]:
    """Admissible moment multi-indices (share power first), lexicographic within each order."""
    out = []
    width = dim_delta + 1
    for n in range(min_order, max_order + 1):
        for idx in itertools.product(range(n + 1), repeat=width):
            if sum(idx) != n or idx[0] == 0:
                continue
            if n >= 2 and not any(idx[1:]):
                continue
            out.append(tuple(idx))
    return sorted(out, key=lambda t: (sum(t), tuple(-a for a in t)))


@dataclass(frozen=True, eq=False)
class EMDictionary(Dictionary):
    """Symmetric empirical-moment features of a rival-block state vector.

    Raw moments are rival averages of ``s_k^p1 * prod_c delta_kc^p(c+1)``;
    the features are an outer polynomial dictionary applied to that moment
    vector. Per-moment rival contributions are sorted before summation so
    that relabelling rivals gives bitwise-identical output.
    """

    num_rivals: int
    dim_delta: int
    moments: tuple
    outer: PolyDictionary = field(repr=False)

    @property
    def input_dim(self) -> int:
        return self.num_rivals * (self.dim_delta + 1)

    @property
    def functions(self) -> tuple:
        return tuple(("em", self.moments, f) for f in self.outer.functions)

    def _blocks(self, points):
        P = _as_points(points, self.input_dim)
        return P.reshape(P.shape[0], self.num_rivals, self.dim_delta + 1)

    def raw_moments(self, points) -> np.ndarray:
        B = self._blocks(points)
        E = np.array(self.moments, dtype=np.int64)
        # contrib[n, r, m] = prod_c B[n, r, c] ** E[m, c]
        contrib = np.prod(B[:, :, None, :] ** E[None, None, :, :], axis=3)
        return np.sort(contrib, axis=1).sum(axis=1) / self.num_rivals

    def raw_moment_jacobian(self, points) -> np.ndarray:
        """d moment_m / d omega -> (n, n_moments, input_dim)."""
        B = self._blocks(points)
        n, R, W = B.shape
        E = np.array(self.moments, dtype=np.int64)
        M = E.shape[0]
        J = np.zeros((n, M, R, W))
        for c in range(W):
            live = np.nonzero(E[:, c])[0]
            if live.size == 0:
                continue
            Ec = E[live]
            term = Ec[None, None, :, c] * B[:, :, None, c] ** (Ec[None, None, :, c] - 1)
            for e in range(W):
                if e != c:
                    term = term * B[:, :, None, e] ** Ec[None, None, :, e]
            J[..., c][:, live, :] = np.transpose(term, (0, 2, 1))
        return J.reshape(n, M, R * W) / self.num_rivals

    def matrix(self, points) -> np.ndarray:
        return self.outer.matrix(self.raw_moments(points))

    def jacobian(self, points) -> np.ndarray:
        inner = self.raw_moments(points)
        outer_J = self.outer.jacobian(inner)  # (n, size, n_moments)
        return np.einsum("nkm,nmd->nkd", outer_J, self.raw_moment_jacobian(points))


def build_em_dictionary(
    num_rivals: int,
    dim_delta: int,
    min_order: int,
    max_order: int,
    outer_degree: int = 2,
    outer_interactions: bool = True,
) -> EMDictionary:
    if num_rivals < 1 or dim_delta < 1:
        raise DictionaryError("num_rivals and dim_delta must be positive")
    if min_order < 1 or max_order < min_order:
        raise DictionaryError(f"invalid order range [{min_order}, {max_order}]")
    moments = tuple(em_moment_indices(dim_delta, min_order, max_order))
    if not moments:
        raise DictionaryError("no admissible moments for the requested orders")
    outer = build_poly_dictionary(len(moments), outer_degree, outer_interactions)
    return EMDictionary(num_rivals=num_rivals, dim_delta=dim_delta, moments=moments, outer=outer)
