"""Randomized empirical interpolation with statistical error certificates.

Interpolation points are drawn uniformly at random among the unused samples
(adaptive cross approximation with partial pivoting), so the quantity is never
evaluated on the whole sample set.  The error is certified a posteriori from
a few randomly probed entries with a Student-t confidence bound.

Both flavors work on a *source*: an object exposing ``n_rows``,
``n_samples``, ``column(q)`` (full vector at sample q) and
``entries(rows, qs)`` (selected entries).  Matrix sources flatten each
matrix to its entries on a fixed sparsity pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.stats

from .core import (LowRankMatrixFamily, LowRankVectorFamily, OracleLedger,
                   SparsityPattern)

# error columns below this fraction of the column scale are roundoff
ZERO_TOL = 1e-12


def student_t_quantile(alpha: float, dof: float) -> float:
    """Upper (1 - alpha) quantile of Student's t distribution."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if dof < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {dof}")
    return float(scipy.stats.t.ppf(1.0 - alpha, dof))


# -- sources -------------------------------------------------------------------


class DenseVectorSource:
    """Vector source backed by an explicit N x Q matrix (for testing)."""

    def __init__(self, matrix, ledger: OracleLedger | None = None,
                 column_counter="residual_vector_calls",
                 entry_counter="residual_entry_calls"):
        self.matrix = np.asarray(matrix, dtype=float)
        self.ledger = ledger if ledger is not None else OracleLedger()
        self._column_counter = column_counter
        self._entry_counter = entry_counter

    @property
    def n_rows(self):
        return self.matrix.shape[0]

    @property
    def n_samples(self):
        return self.matrix.shape[1]

    def column(self, q):
        self.ledger.add(self._column_counter)
        return self.matrix[:, q].copy()

    def entries(self, rows, qs):
        rows = np.asarray(rows, dtype=np.int64)
        self.ledger.add(self._entry_counter, rows.size)
        return self.matrix[rows, np.asarray(qs, dtype=np.int64)]


class MatrixFamilySource:
    """Matrix source evaluating a callable ``q -> sparse matrix`` on a pattern."""

    def __init__(self, evaluate: Callable, pattern: SparsityPattern, Q: int,
                 ledger: OracleLedger | None = None):
        self._evaluate = evaluate
        self.pattern = pattern
        self._Q = Q
        self.ledger = ledger if ledger is not None else OracleLedger()
        self._cache = {}

    @property
    def n_rows(self):
        return self.pattern.nnz

    @property
    def n_samples(self):
        return self._Q

    def _data(self, q):
        if q not in self._cache:
            self._cache[q] = self.pattern.flatten(self._evaluate(q))
        return self._cache[q]

    def column(self, q):
        self.ledger.add("precond_matrix_calls")
        return self._data(q).copy()

    def entries(self, flat, qs):
        flat = np.asarray(flat, dtype=np.int64)
        self.ledger.add("precond_entry_calls", flat.size)
        return np.array([self._data(int(q))[f] for f, q in zip(flat, qs)])


# -- interpolants --------------------------------------------------------------


@dataclass
class RandomizedVectorInterpolant:
    """Interpolant sum_j R(xi*_j) alpha_j(xi), stored in Newton form.

    ``basis`` holds the normalized error columns (N x r) and ``coeffs`` their
    coefficients at every sample (r x Q); ``magic_rows`` are the raw entries
    R_{i_k}(xi_q) at the magic indices.
    """

    points: list
    magic_indices: list
    snapshots: np.ndarray
    basis: np.ndarray
    coeffs: np.ndarray
    magic_rows: np.ndarray
    seed: int | None = None
    exhausted: bool = False
    rejections: int = 0

    @property
    def rank(self) -> int:
        return len(self.points)

    @property
    def shape(self):
        return self.basis.shape[0], self.coeffs.shape[1]

    @property
    def magic_matrix(self) -> np.ndarray:
        """r x r matrix with entry (k, j) = R_{i_k}(xi*_j)."""
        return self.snapshots[self.magic_indices]

    def alpha(self, q=None) -> np.ndarray:
        rhs = self.magic_rows if q is None else self.magic_rows[:, q]
        if self.rank == 0:
            return np.zeros((0,) + np.shape(rhs)[1:])
        return scipy.linalg.lu_solve(scipy.linalg.lu_factor(self.magic_matrix), rhs)

    def evaluate(self, q: int) -> np.ndarray:
        return self.basis @ self.coeffs[:, q]

    def entry_values(self, rows, qs) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        qs = np.asarray(qs, dtype=np.int64)
        if self.rank == 0:
            return np.zeros(rows.size)
        return np.einsum("kr,rk->k", self.basis[rows], self.coeffs[:, qs])

    def to_family(self) -> LowRankVectorFamily:
        return LowRankVectorFamily(self.basis, self.coeffs)


@dataclass
class MatrixInterpolant:
    """Interpolant sum_k P(xi#_k) beta_k(xi) of a sparse matrix family."""

    flat: RandomizedVectorInterpolant
    pattern: SparsityPattern

    @property
    def points(self):
        return self.flat.points

    @property
    def rank(self):
        return self.flat.rank

    @property
    def magic_pairs(self) -> list:
        return [self.pattern.pair(f) for f in self.flat.magic_indices]

    @property
    def magic_matrix(self):
        return self.flat.magic_matrix

    @property
    def snapshots(self) -> list:
        return [self.pattern.to_csr(self.flat.snapshots[:, j]) for j in range(self.rank)]

    @property
    def exhausted(self):
        return self.flat.exhausted

    def beta(self, q=None):
        return self.flat.alpha(q)

    def evaluate(self, q: int):
        return self.pattern.to_csr(self.flat.evaluate(q))

    def entry_values(self, rows, qs):
        return self.flat.entry_values(rows, qs)

    def to_family(self) -> LowRankMatrixFamily:
        mats = tuple(self.pattern.to_csr(self.flat.basis[:, j]) for j in range(self.rank))
        return LowRankMatrixFamily(mats, self.flat.coeffs, N=self.pattern.N)


# -- statistical certificate ----------------------------------------------------


@dataclass
class ProbeSet:
    rows: np.ndarray
    samples: np.ndarray
    values: np.ndarray
    exact: bool = False


@dataclass
class StatEstimate:
    M: int
    mean: float          # Y_M, estimate of the squared Frobenius error
    sigma: float         # sample standard deviation of the X_k
    t_quantile: float
    e_bound: float       # upper bound on the Frobenius error at level 1 - alpha
    confidence: float
    z_norm: float        # Z_M, estimate of the Frobenius norm of the quantity
    max_abs_error: float
    probes: ProbeSet = field(repr=False)
    exact: bool = False


def draw_probes(source, M: int, seed=None) -> ProbeSet:
    """M i.i.d. uniform (row, sample) pairs and their values (M entry calls).

    If M is at least the number of pairs, every pair is evaluated once.
    """
    n, Q = source.n_rows, source.n_samples
    if M < 2:
        raise ValueError("at least two probes are required")
    if M >= n * Q:
        rows = np.tile(np.arange(n), Q)
        samples = np.repeat(np.arange(Q), n)
        return ProbeSet(rows, samples, source.entries(rows, samples), exact=True)
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, n, size=M)
    samples = rng.integers(0, Q, size=M)
    return ProbeSet(rows, samples, np.asarray(source.entries(rows, samples), dtype=float))


def certify_error(itp, source, M: int = 100, alpha: float = 0.05, seed=None,
                  probes: ProbeSet | None = None) -> StatEstimate:
    """Monte-Carlo estimate and confidence bound of the Frobenius error.

    Passing ``probes`` from an earlier estimate reuses their values and makes
    no oracle call.
    """
    if probes is None:
        probes = draw_probes(source, M, seed)
    scale = source.n_rows * source.n_samples
    err = probes.values - itp.entry_values(probes.rows, probes.samples)
    M = probes.values.size
    if probes.exact:
        total = float(np.sum(err**2))
        return StatEstimate(
            M=M, mean=total, sigma=0.0, t_quantile=0.0, e_bound=np.sqrt(total),
            confidence=1.0, z_norm=float(np.linalg.norm(probes.values)),
            max_abs_error=float(np.max(np.abs(err), initial=0.0)),
            probes=probes, exact=True,
        )
    X = scale * err**2
    Y = float(np.mean(X))
    sigma = float(np.std(X, ddof=1))
    t = student_t_quantile(alpha, M - 1)
    e2 = Y + t * sigma / np.sqrt(M)
    return StatEstimate(
        M=M, mean=Y, sigma=sigma, t_quantile=t, e_bound=float(np.sqrt(max(e2, 0.0))),
        confidence=1.0 - alpha,
        z_norm=float(np.sqrt(scale / M * np.sum(probes.values**2))),
        max_abs_error=float(np.max(np.abs(err))),
        probes=probes,
    )


@dataclass
class CertifiedStop:
    """Stopping rule ``e_bound <= rho * Z^power / scale^(power - 1)``.

    Also stops when every probed entry is reproduced within ``probe_tol``.
    The probes are drawn on the first call and reused afterwards, so one
    rule instance should serve a single interpolation run.
    """

    rho: float
    power: int = 1
    scale: float | None = None
    M: int = 100
    alpha: float = 0.05
    probe_tol: float = 0.0
    seed: int | None = None
    last: StatEstimate | None = field(default=None, init=False)

    def target(self, est: StatEstimate) -> float:
        z = est.z_norm
        scale = z if self.scale is None else self.scale
        if self.power == 1 or scale == 0.0:
            return self.rho * z
        return self.rho * z**self.power / scale ** (self.power - 1)

    def __call__(self, itp, source) -> bool:
        probes = None if self.last is None else self.last.probes
        est = certify_error(itp, source, self.M, self.alpha, self.seed, probes)
        self.last = est
        return est.e_bound <= self.target(est) or est.max_abs_error <= self.probe_tol


# -- greedy construction ------------------------------------------------------


def _randomized_eim(source, stop, seed, max_rank, zero_tol):
    n, Q = source.n_rows, source.n_samples
    if Q < 1:
        raise ValueError("the sample set is empty")
    max_rank = min(n, Q) if max_rank is None else min(max_rank, n, Q)
    rng = np.random.default_rng(seed)
    order = rng.permutation(Q)

    basis, coeffs, rows_raw = [], [], []
    points, indices, snapshots = [], [], []
    columns = {}
    rejections = 0
    checked = -1  # rank at which the stop rule was last evaluated

    def current(exhausted=False):
        r = len(points)
        return RandomizedVectorInterpolant(
            points=list(points),
            magic_indices=list(indices),
            snapshots=np.column_stack(snapshots) if r else np.zeros((n, 0)),
            basis=np.column_stack(basis) if r else np.zeros((n, 0)),
            coeffs=np.vstack(coeffs) if r else np.zeros((0, Q)),
            magic_rows=np.vstack(rows_raw) if r else np.zeros((0, Q)),
            seed=seed,
            exhausted=exhausted,
            rejections=rejections,
        )

    for q in order:
        q = int(q)
        if len(points) >= max_rank:
            return current()
        col = np.asarray(source.column(q), dtype=float)
        columns[q] = col
        if basis:
            B = np.column_stack(basis)
            err = col - B @ np.array([c[q] for c in coeffs])
        else:
            err = col
        col_scale = np.max(np.abs(col), initial=0.0)
        i_star = int(np.argmax(np.abs(err)))
        if abs(err[i_star]) <= zero_tol * col_scale:
            rejections += 1
            if stop is not None and checked != len(points):
                checked = len(points)
                if stop(current(), source):
                    return current()
            continue

        basis.append(err / err[i_star])
        known = np.array(sorted(columns), dtype=np.int64)
        row = np.empty(Q)
        row[known] = [columns[k][i_star] for k in known]
        missing = np.setdiff1d(np.arange(Q), known, assume_unique=True)
        if missing.size:
            row[missing] = source.entries(np.full(missing.size, i_star), missing)
        c_new = row.copy()
        for b, c in zip(basis[:-1], coeffs):
            c_new -= b[i_star] * c
        coeffs.append(c_new)
        rows_raw.append(row)
        points.append(q)
        indices.append(i_star)
        snapshots.append(col)
        if stop is not None:
            checked = len(points)
            if stop(current(), source):
                return current()
    return current(exhausted=True)


def randomized_vector_eim(source, stop=None, seed=None, max_rank: int | None = None,
                          zero_tol: float = ZERO_TOL) -> RandomizedVectorInterpolant:
    """Randomized EIM of a vector source.

    ``stop(itp, source) -> bool`` is evaluated after every accepted point and
    once after a rejection at an unchecked rank.  A draw whose error column
    vanishes (max entry at most ``zero_tol`` times the column scale) is
    rejected.  If every sample has been drawn the result is flagged
    ``exhausted``.
    """
    return _randomized_eim(source, stop, seed, max_rank, zero_tol)


def randomized_matrix_eim(source, stop=None, seed=None, max_rank: int | None = None,
                          zero_tol: float = ZERO_TOL) -> MatrixInterpolant:
    """Randomized EIM of a sparse matrix source; magic entries stay on its pattern."""
    flat = _randomized_eim(source, stop, seed, max_rank, zero_tol)
    return MatrixInterpolant(flat, source.pattern)
