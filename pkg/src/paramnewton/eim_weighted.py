"""Empirical interpolation with partially known low-rank structure.

The quantity to approximate is R(xi) = G gamma(xi) where the coefficient
functions gamma are known at every sample and the factor G is not.  G is
recovered from s evaluations of R, and the greedy interpolation of gamma is
driven by the semi-norm induced by the Gram matrix W = G^T M G, so that the
interpolation error on R is controlled exactly.

Preconditioners are handled by flattening each P(xi) to its vector of stored
entries; the Euclidean inner product of flattened matrices is the Frobenius
inner product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .core import EUCLIDEAN, LowRankVectorFamily, NormSpec, parallel_map

RANK_TOL = 1e-12
MAX_PIVOT_COND = 1e12
# errors below this fraction of the initial error are roundoff
EIM_FLOOR = 1e-13


class RankDeficientError(ValueError):
    """Raised when the selected coefficient columns are numerically singular."""


@dataclass(frozen=True)
class CoefficientTable:
    """Known coefficient functions sampled on the whole sample set (s x Q)."""

    gamma: np.ndarray

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        object.__setattr__(self, "gamma", g)

    @property
    def s(self) -> int:
        return self.gamma.shape[0]

    @property
    def Q(self) -> int:
        return self.gamma.shape[1]


@dataclass
class GramData:
    G: np.ndarray
    W: np.ndarray
    pivot_samples: list
    effective_rank: int
    snapshots: dict = field(default_factory=dict)
    pivot_cond: float = 1.0


@dataclass
class VectorInterpolant:
    """Greedy interpolant of a coefficient table, in Newton form.

    ``basis`` (s x r) holds the normalized error columns selected by the greedy
    loop and ``coeffs`` (r x Q) their coefficients, so that the interpolant at
    sample q is ``basis @ coeffs[:, q]``.
    """

    points: list
    magic_indices: list
    basis_values: np.ndarray
    snapshot_columns: np.ndarray
    achieved_error: float
    basis: np.ndarray
    coeffs: np.ndarray
    magic_rows: np.ndarray
    error_history: list

    @property
    def rank(self) -> int:
        return len(self.points)

    def evaluate(self, q: int) -> np.ndarray:
        return self.basis @ self.coeffs[:, q]

    def alpha(self, q=None) -> np.ndarray:
        """Interpolation coefficients alpha_j(xi_q) of the snapshot columns."""
        rhs = self.magic_rows if q is None else self.magic_rows[:, q]
        if self.rank == 0:
            return np.zeros((0,) + np.shape(rhs)[1:])
        lu = scipy.linalg.lu_factor(self.basis_values)
        return scipy.linalg.lu_solve(lu, rhs)

    def to_family(self) -> LowRankVectorFamily:
        return LowRankVectorFamily(self.basis, self.coeffs)


def reduce_rank(table: CoefficientTable, tol: float = RANK_TOL):
    """Factor gamma = L @ gamma_reduced with gamma_reduced of full row rank.

    Rows are equilibrated before the SVD so that the rank decision does not
    depend on the scaling of individual coefficient functions.  A table that
    is already of full rank is returned unchanged with L = I.
    """
    gamma = table.gamma
    s = table.s
    scale = np.linalg.norm(gamma, axis=1)
    scale[scale == 0.0] = 1.0
    U, sv, Vt = scipy.linalg.svd(gamma / scale[:, None], full_matrices=False)
    if sv.size == 0 or sv[0] == 0.0:
        return CoefficientTable(np.zeros((0, table.Q))), np.zeros((s, 0))
    keep = int(np.sum(sv > tol * sv[0]))
    if keep == s:
        return table, np.eye(s)
    L = scale[:, None] * U[:, :keep] * sv[:keep]
    return CoefficientTable(Vt[:keep]), L


def recover_gram(table: CoefficientTable, residual_oracle: Callable[[int], np.ndarray],
                 norm: NormSpec = EUCLIDEAN, threads: int = 1) -> GramData:
    """Recover G from s residual evaluations and form W = G^T M G.

    ``residual_oracle(q)`` must return R(xi_q); it is called exactly once per
    selected pivot sample.
    """
    gamma = table.gamma
    s = table.s
    if s == 0:
        return GramData(np.zeros((0, 0)), np.zeros((0, 0)), [], 0)
    if s > table.Q:
        raise RankDeficientError(
            f"{s} coefficient functions but only {table.Q} samples; reduce the rank first"
        )
    _, _, piv = scipy.linalg.qr(gamma, pivoting=True, mode="economic")
    pivots = [int(q) for q in piv[:s]]
    sub = gamma[:, pivots]
    cond = np.linalg.cond(sub)
    if not np.isfinite(cond) or cond > MAX_PIVOT_COND:
        raise RankDeficientError(
            f"pivot coefficient matrix has condition number {cond:.3e}; "
            "apply reduce_rank to the table first"
        )
    columns = parallel_map(residual_oracle, pivots, threads)
    snapshot = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    G = scipy.linalg.solve(sub.T, snapshot.T).T
    W = norm.gram(G)
    W = 0.5 * (W + W.T)
    return GramData(G, W, pivots, s, dict(zip(pivots, columns)), float(cond))


def _seminorm_factor(W: np.ndarray) -> np.ndarray:
    """F with ||F x||^2 = x^T W x, negative eigenvalues from roundoff clipped."""
    W = 0.5 * (W + W.T)
    lam, V = scipy.linalg.eigh(W)
    lam = np.clip(lam, 0.0, None)
    return np.sqrt(lam)[:, None] * V.T


def weighted_eim(table: CoefficientTable, W: np.ndarray, zeta: float = 0.0,
                 max_rank: int | None = None) -> VectorInterpolant:
    """Greedy interpolation of gamma controlled in the W semi-norm.

    Stops when the largest W-error over the samples is at most ``zeta``, when
    it is at roundoff level (``EIM_FLOOR`` times the initial error), or when
    ``max_rank`` points have been selected.
    """
    gamma = table.gamma
    s, Q = gamma.shape
    if zeta < 0:
        raise ValueError("zeta must be nonnegative")
    max_rank = s if max_rank is None else min(max_rank, s)
    F = _seminorm_factor(np.asarray(W, dtype=float)) if s else np.zeros((0, 0))

    E = gamma.copy()
    points, indices, basis, coeffs, history = [], [], [], [], []
    while True:
        errs = np.linalg.norm(F @ E, axis=0) if s else np.zeros(Q)
        q_star = int(np.argmax(errs))
        emax = float(errs[q_star])
        history.append(emax)
        if emax <= max(zeta, EIM_FLOOR * history[0]) or emax == 0.0 \
                or len(points) >= max_rank:
            break
        col = E[:, q_star]
        i_star = int(np.argmax(np.abs(col)))
        pivot = col[i_star]
        b = col / pivot
        c = E[i_star].copy()
        E -= np.outer(b, c)
        E[i_star] = 0.0
        points.append(q_star)
        indices.append(i_star)
        basis.append(b)
        coeffs.append(c)

    r = len(points)
    basis = np.column_stack(basis) if r else np.zeros((s, 0))
    coeffs = np.vstack(coeffs) if r else np.zeros((0, Q))
    return VectorInterpolant(
        points=points,
        magic_indices=indices,
        basis_values=gamma[np.ix_(indices, points)],
        snapshot_columns=gamma[:, points],
        achieved_error=history[-1],
        basis=basis,
        coeffs=coeffs,
        magic_rows=gamma[indices],
        error_history=history,
    )


def lift_interpolant(itp: VectorInterpolant,
                     residual_oracle: Callable[[int], np.ndarray] | None = None,
                     gram: GramData | None = None,
                     N: int | None = None) -> LowRankVectorFamily:
    """The interpolant sum_j R(xi*_j) alpha_j(xi) as a rank-r family.

    With ``gram`` the snapshots R(xi*_j) = G gamma(xi*_j) are reconstructed
    from the recovered factor and no oracle call is made.  Otherwise the
    oracle is called once per interpolation point.
    """
    Q = itp.coeffs.shape[1]
    if itp.rank == 0:
        if N is None:
            if gram is None:
                raise ValueError("N is required to lift an empty interpolant")
            N = gram.G.shape[0]
        return LowRankVectorFamily.zeros(N, Q)
    if gram is not None:
        return LowRankVectorFamily(gram.G @ itp.basis, itp.coeffs)
    if residual_oracle is None:
        raise ValueError("either a residual oracle or recovered Gram data is required")
    S = np.column_stack([np.asarray(residual_oracle(q), dtype=float) for q in itp.points])
    # snapshots = newton_basis @ T with T upper triangular (T_jj = pivots)
    T = itp.coeffs[:, itp.points]
    spatial = scipy.linalg.solve_triangular(T, S.T, trans="T", lower=False).T
    return LowRankVectorFamily(spatial, itp.coeffs)
