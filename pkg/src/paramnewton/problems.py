"""Benchmark problems on a finite-difference grid of the unit square.

Unknowns are the interior nodes of an n x n grid with mesh width
h = 1 / (n + 1), numbered lexicographically: node (i, j), 0 <= i, j < n, has
index k = i * n + j.  Homogeneous Dirichlet conditions hold on the boundary.

Every problem exposes pure evaluators (``residual``, ``precond``, batched
entry evaluators) and counted wrappers that charge an :class:`OracleLedger`.
The sign convention is R(u) = f - F(u) and P = F'(u) (or its symmetric part),
so that a Newton step solves P du = R.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .core import LowRankVectorFamily, OracleLedger, SampleSet, SparsityPattern

EXP_LIMIT = 700.0

SAMPLE_UPPER = {"cubic": 10.0, "expdiff": 3.0}


def sample_recipes(problem: str, Q: int, seed: int) -> SampleSet:
    """Q i.i.d. samples exp(zeta) - 1, zeta uniform on (0, 10) or (0, 3)."""
    try:
        upper = SAMPLE_UPPER[problem]
    except KeyError:
        raise ValueError(f"unknown problem {problem!r}; expected one of {sorted(SAMPLE_UPPER)}")
    return SampleSet.exp_uniform(Q, upper, seed)


@dataclass(frozen=True)
class GridSpec:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 3:
            raise ValueError(f"grid needs n >= 3 interior points per dimension, got {self.n}")

    @property
    def N(self) -> int:
        return self.n * self.n

    @property
    def h(self) -> float:
        return 1.0 / (self.n + 1)

    def index(self, i: int, j: int) -> int:
        return i * self.n + j

    @cached_property
    def stencil(self) -> np.ndarray:
        """N x 5 table: node, then its west, east, south, north neighbours.

        Missing (boundary) neighbours point to the padding index N.
        """
        n, N = self.n, self.N
        i, j = np.divmod(np.arange(N), n)
        k = np.arange(N)
        tab = np.full((N, 5), N, dtype=np.int64)
        tab[:, 0] = k
        tab[:, 1] = np.where(j > 0, k - 1, N)
        tab[:, 2] = np.where(j < n - 1, k + 1, N)
        tab[:, 3] = np.where(i > 0, k - n, N)
        tab[:, 4] = np.where(i < n - 1, k + n, N)
        return tab


def laplacian(grid: GridSpec) -> sp.csr_matrix:
    """Five-point matrix of -Laplace with Dirichlet conditions (scale 1/h^2)."""
    n = grid.n
    T = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
    I = sp.identity(n)
    A = (sp.kron(I, T) + sp.kron(T, I)) / grid.h**2
    A = sp.csr_matrix(A)
    # kron stores the zero blocks explicitly
    A.eliminate_zeros()
    A.sort_indices()
    return A


def _stencil_values(u_fam: LowRankVectorFamily, tab: np.ndarray, rows, qs) -> np.ndarray:
    """u(xi_q) at the five stencil nodes of each requested row (k x 5)."""
    V = np.vstack([u_fam.spatial, np.zeros((1, u_fam.rank))])
    idx = tab[rows]
    if u_fam.rank == 0:
        return np.zeros(idx.shape)
    return np.einsum("kcr,rk->kc", V[idx], u_fam.coeffs[:, qs])


class Problem:
    """Common oracle machinery; subclasses provide the pure evaluators."""

    name = "problem"
    spd_precond = False
    has_structure = False

    def __init__(self, grid: GridSpec, samples: SampleSet, ledger: OracleLedger | None = None):
        self.grid = grid
        self.samples = samples
        self.ledger = ledger if ledger is not None else OracleLedger()
        self.A = laplacian(grid)
        self.pattern = SparsityPattern.from_matrix(self.A)
        tab = grid.stencil
        # slot of the column of every pattern entry inside the stencil table
        rows, cols = self.pattern.rows, self.pattern.indices
        hit = tab[rows] == cols[:, None]
        if not np.all(hit.any(axis=1)):
            raise ValueError("the matrix pattern is not the five-point stencil")
        self._slot = np.argmax(hit, axis=1)

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def Q(self) -> int:
        return self.samples.count

    def _check(self, u_q):
        u_q = np.asarray(u_q, dtype=float)
        if u_q.shape != (self.N,):
            raise ValueError(f"state has shape {u_q.shape}, expected ({self.N},)")
        return u_q

    # pure evaluators -------------------------------------------------------
    def residual(self, u_q, q: int) -> np.ndarray:
        raise NotImplementedError

    def precond_data(self, u_q, q: int) -> np.ndarray:
        raise NotImplementedError

    def precond(self, u_q, q: int) -> sp.csr_matrix:
        return self.pattern.to_csr(self.precond_data(u_q, q))

    def jacobian(self, u_q, q: int) -> sp.csr_matrix:
        return self.precond(u_q, q)

    def residual_entries(self, u_fam, rows, qs) -> np.ndarray:
        raise NotImplementedError

    def precond_entries(self, u_fam, flat, qs) -> np.ndarray:
        raise NotImplementedError

    # counted oracles ---------------------------------------------------------
    def residual_full(self, u_q, q: int) -> np.ndarray:
        self.ledger.add("residual_vector_calls")
        return self.residual(u_q, q)

    def precond_full(self, u_q, q: int) -> sp.csr_matrix:
        self.ledger.add("precond_matrix_calls")
        return self.precond(u_q, q)

    def residual_entry(self, u_fam, i: int, q: int) -> float:
        self.ledger.add("residual_entry_calls")
        return float(self.residual_entries(u_fam, [i], [q])[0])

    def precond_entry(self, u_fam, ij, q: int) -> float:
        self.ledger.add("precond_entry_calls")
        return float(self.precond_entries(u_fam, [self.pattern.flat_index(*ij)], [q])[0])

    def residual_source(self, u_fam: LowRankVectorFamily) -> "ResidualSource":
        return ResidualSource(self, u_fam)

    def precond_source(self, u_fam: LowRankVectorFamily) -> "PrecondSource":
        return PrecondSource(self, u_fam)

    def _xi(self, qs):
        return self.samples.values[np.asarray(qs, dtype=np.int64)]


class ResidualSource:
    """Counted residual oracle at a fixed iterate, as an interpolation source."""

    def __init__(self, problem: Problem, u_fam: LowRankVectorFamily):
        self.problem = problem
        self.u = u_fam
        self.ledger = problem.ledger

    @property
    def n_rows(self):
        return self.problem.N

    @property
    def n_samples(self):
        return self.problem.Q

    def column(self, q):
        return self.problem.residual_full(self.u.evaluate(q), q)

    def entries(self, rows, qs):
        rows = np.asarray(rows, dtype=np.int64)
        self.ledger.add("residual_entry_calls", rows.size)
        return self.problem.residual_entries(self.u, rows, qs)


class PrecondSource:
    """Counted preconditioner oracle, flattened on the problem's pattern."""

    def __init__(self, problem: Problem, u_fam: LowRankVectorFamily):
        self.problem = problem
        self.u = u_fam
        self.ledger = problem.ledger
        self.pattern = problem.pattern

    @property
    def n_rows(self):
        return self.pattern.nnz

    @property
    def n_samples(self):
        return self.problem.Q

    def column(self, q):
        self.ledger.add("precond_matrix_calls")
        return self.problem.precond_data(self.u.evaluate(q), q)

    def entries(self, flat, qs):
        flat = np.asarray(flat, dtype=np.int64)
        self.ledger.add("precond_entry_calls", flat.size)
        return self.problem.precond_entries(self.u, flat, qs)


class CubicReaction(Problem):
    """-Lap u + (xi/3) u^3 = 1, preconditioned by the exact Jacobian."""

    name = "cubic"
    has_structure = True

    def __init__(self, grid, samples, ledger=None):
        super().__init__(grid, samples, ledger)
        self._diag = np.array([self.pattern.flat_index(k, k) for k in range(self.N)])

    def residual(self, u_q, q):
        u = self._check(u_q)
        xi = self.samples[q]
        return 1.0 - self.A @ u - (xi / 3.0) * u**3

    def precond_data(self, u_q, q):
        u = self._check(u_q)
        data = self.A.data.copy()
        data[self._diag] += self.samples[q] * u**2
        return data

    def residual_entries(self, u_fam, rows, qs):
        rows = np.asarray(rows, dtype=np.int64)
        U = _stencil_values(u_fam, self.grid.stencil, rows, qs)
        lap = (4.0 * U[:, 0] - U[:, 1:].sum(axis=1)) / self.grid.h**2
        return 1.0 - lap - self._xi(qs) / 3.0 * U[:, 0] ** 3

    def precond_entries(self, u_fam, flat, qs):
        flat = np.asarray(flat, dtype=np.int64)
        rows = self.pattern.rows[flat]
        out = self.A.data[flat].copy()
        diag = self._slot[flat] == 0
        if np.any(diag):
            U = _stencil_values(u_fam, self.grid.stencil, rows[diag], np.asarray(qs)[diag])
            out[diag] += self._xi(np.asarray(qs)[diag]) * U[:, 0] ** 2
        return out

    def structure(self, lam: np.ndarray):
        """Known coefficient functions of the residual and the Jacobian.

        For u(xi) = sum_i v_i lam_i(xi), the residual is G gamma(xi) with
        gamma = [1; lam_i; (xi/3) lam_j lam_k lam_l] and the Jacobian is
        sum_i P_i phi_i(xi) with phi = [1; xi lam_j lam_k].
        """
        lam = np.atleast_2d(np.asarray(lam, dtype=float)).reshape(-1, self.Q)
        xi = self.samples.values
        m = lam.shape[0]
        one = np.ones((1, self.Q))
        pairs = (lam[:, None, :] * lam[None, :, :]).reshape(m * m, self.Q)
        triples = (pairs[:, None, :] * lam[None, :, :]).reshape(m**3, self.Q)
        gamma = np.vstack([one, lam, xi / 3.0 * triples])
        phi = np.vstack([one, xi * pairs])
        return gamma, phi


class ExpDiffusion(Problem):
    """-div(exp(xi u) grad u) = 1, preconditioned by the frozen-coefficient operator."""

    name = "expdiff"
    spd_precond = True

    def _faces(self, U: np.ndarray, xi: np.ndarray, where) -> np.ndarray:
        """Face coefficients exp(xi (u_0 + u_d) / 2) for the 4 neighbours (k x 4)."""
        arg = xi[:, None] * 0.5 * (U[:, :1] + U[:, 1:])
        bad = np.flatnonzero(np.any(arg > EXP_LIMIT, axis=1))
        if bad.size:
            q = where(bad[0])
            raise FloatingPointError(
                f"exp(xi u) overflows at sample {q} (xi = {self.samples[q]:.6g}); "
                "the iteration is diverging"
            )
        return np.exp(arg)

    def _nodal(self, u_q, q):
        u = self._check(u_q)
        U = np.append(u, 0.0)[self.grid.stencil]
        xi = np.full(self.N, self.samples[q])
        return U, self._faces(U, xi, lambda k: q)

    def residual(self, u_q, q):
        U, a = self._nodal(u_q, q)
        flux = np.sum(a * (U[:, :1] - U[:, 1:]), axis=1) / self.grid.h**2
        return 1.0 - flux

    def precond_data(self, u_q, q):
        _, a = self._nodal(u_q, q)
        return self._assemble(a[self.pattern.rows], self._slot)

    def _assemble(self, a, slot):
        """Pattern entries from face coefficients aligned with their rows."""
        h2 = self.grid.h**2
        out = np.empty(slot.size)
        diag = slot == 0
        out[diag] = a[diag].sum(axis=1) / h2
        off = ~diag
        out[off] = -a[off, slot[off] - 1] / h2
        return out

    def jacobian(self, u_q, q):
        """Full Jacobian of u -> D(u) u, including the coefficient derivative."""
        U, a = self._nodal(u_q, q)
        tab = self.grid.stencil
        # d a_f / d u = xi a_f / 2 for both end nodes of face f
        w = 0.5 * self.samples[q] * a * (U[:, :1] - U[:, 1:]) / self.grid.h**2
        rows = np.repeat(np.arange(self.N), 5)
        cols = tab.ravel()
        vals = np.column_stack([w.sum(axis=1), w]).ravel()
        ok = cols < self.N
        extra = sp.csr_matrix((vals[ok], (rows[ok], cols[ok])), shape=(self.N, self.N))
        return (self.precond(u_q, q) + extra).tocsr()

    def residual_entries(self, u_fam, rows, qs):
        rows = np.asarray(rows, dtype=np.int64)
        qs = np.asarray(qs, dtype=np.int64)
        U = _stencil_values(u_fam, self.grid.stencil, rows, qs)
        a = self._faces(U, self._xi(qs), lambda k: int(qs[k]))
        return 1.0 - np.sum(a * (U[:, :1] - U[:, 1:]), axis=1) / self.grid.h**2

    def precond_entries(self, u_fam, flat, qs):
        flat = np.asarray(flat, dtype=np.int64)
        qs = np.asarray(qs, dtype=np.int64)
        rows = self.pattern.rows[flat]
        U = _stencil_values(u_fam, self.grid.stencil, rows, qs)
        a = self._faces(U, self._xi(qs), lambda k: int(qs[k]))
        return self._assemble(a, self._slot[flat])


class AffineProblem(Problem):
    """R(u; xi) = 1 - (A + xi I) u, a linear problem with known structure."""

    name = "affine"
    has_structure = True

    def __init__(self, grid, samples, ledger=None):
        super().__init__(grid, samples, ledger)
        self._diag = np.array([self.pattern.flat_index(k, k) for k in range(self.N)])

    def residual(self, u_q, q):
        u = self._check(u_q)
        return 1.0 - self.A @ u - self.samples[q] * u

    def precond_data(self, u_q, q):
        self._check(u_q)
        data = self.A.data.copy()
        data[self._diag] += self.samples[q]
        return data

    def residual_entries(self, u_fam, rows, qs):
        rows = np.asarray(rows, dtype=np.int64)
        U = _stencil_values(u_fam, self.grid.stencil, rows, qs)
        lap = (4.0 * U[:, 0] - U[:, 1:].sum(axis=1)) / self.grid.h**2
        return 1.0 - lap - self._xi(qs) * U[:, 0]

    def precond_entries(self, u_fam, flat, qs):
        flat = np.asarray(flat, dtype=np.int64)
        out = self.A.data[flat].copy()
        diag = self._slot[flat] == 0
        out[diag] += self._xi(np.asarray(qs)[diag])
        return out

    def structure(self, lam):
        lam = np.atleast_2d(np.asarray(lam, dtype=float)).reshape(-1, self.Q)
        xi = self.samples.values
        one = np.ones((1, self.Q))
        return np.vstack([one, lam, xi * lam]), np.vstack([one, xi[None, :]])


PROBLEMS = {"cubic": CubicReaction, "expdiff": ExpDiffusion}


def make_problem(name: str, n: int, Q: int, seed: int,
                 ledger: OracleLedger | None = None) -> Problem:
    if name not in PROBLEMS:
        raise ValueError(f"unknown problem {name!r}; expected one of {sorted(PROBLEMS)}")
    return PROBLEMS[name](GridSpec(n), sample_recipes(name, Q, seed), ledger)
