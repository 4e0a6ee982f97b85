"""Parameter sample sets and low-rank parameter-dependent vectors and matrices.

A parameter-dependent vector v(xi) sampled on a finite set of Q parameter
values is stored in factored form ``V @ C`` where ``V`` is N x r and ``C`` is
r x Q.  Matrices are stored as a list of (possibly sparse) N x N factors and a
p x Q coefficient table.  Samples are always addressed by their index.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp


@dataclass(frozen=True)
class SampleSet:
    """Ordered finite set of scalar parameter values."""

    values: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size == 0:
            raise ValueError("a sample set needs at least one value")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def count(self) -> int:
        return self.values.size

    def __len__(self):
        return self.values.size

    def __getitem__(self, q):
        return self.values[q]

    @classmethod
    def exp_uniform(cls, Q: int, upper: float, seed: int) -> "SampleSet":
        """Q i.i.d. draws of exp(zeta) - 1 with zeta ~ U(0, upper)."""
        if Q < 1:
            raise ValueError("Q must be positive")
        rng = np.random.default_rng(seed)
        zeta = rng.uniform(0.0, upper, size=Q)
        return cls(np.expm1(zeta), seed=seed)


@dataclass(frozen=True)
class NormSpec:
    """Inner product on R^N, either Euclidean or induced by an SPD matrix."""

    kind: str = "euclidean"
    weight: np.ndarray | sp.spmatrix | None = None

    def __post_init__(self):
        if self.kind not in ("euclidean", "weighted"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.kind == "weighted":
            if self.weight is None:
                raise ValueError("weighted norm requires a weight matrix")
            dense = _dense(self.weight)
            if dense.shape[0] != dense.shape[1]:
                raise ValueError("weight matrix must be square")
            if np.max(np.abs(dense - dense.T), initial=0.0) > 1e-14 * max(
                np.max(np.abs(dense)), 1.0
            ):
                raise ValueError("weight matrix is not symmetric")
            try:
                scipy.linalg.cholesky(dense, lower=True)
            except np.linalg.LinAlgError as exc:
                raise ValueError("weight matrix is not positive definite") from exc

    @classmethod
    def weighted(cls, M) -> "NormSpec":
        return cls("weighted", M)

    @property
    def is_euclidean(self) -> bool:
        return self.kind == "euclidean"

    def apply(self, X):
        """Return M @ X (identity for the Euclidean norm)."""
        if self.is_euclidean:
            return X
        return self.weight @ X

    def gram(self, A, B=None) -> np.ndarray:
        """Return A^T M B for dense column blocks."""
        B = A if B is None else B
        return np.asarray(A.T @ self.apply(B))

    def cholesky_factor(self) -> np.ndarray:
        """Lower Cholesky factor L of M, with M = L L^T."""
        return scipy.linalg.cholesky(_dense(self.weight), lower=True)


EUCLIDEAN = NormSpec()


def _dense(A) -> np.ndarray:
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)


@dataclass(frozen=True)
class LowRankVectorFamily:
    """Parameter-dependent vector ``sum_i spatial[:, i] * coeffs[i, q]``."""

    spatial: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        V = np.asarray(self.spatial, dtype=float)
        C = np.asarray(self.coeffs, dtype=float)
        if V.ndim != 2 or C.ndim != 2:
            raise ValueError("factors must be two-dimensional")
        if V.shape[1] != C.shape[0]:
            raise ValueError(
                f"rank mismatch: spatial has {V.shape[1]} columns, "
                f"coeffs has {C.shape[0]} rows"
            )
        object.__setattr__(self, "spatial", V)
        object.__setattr__(self, "coeffs", C)

    @classmethod
    def zeros(cls, N: int, Q: int) -> "LowRankVectorFamily":
        return cls(np.zeros((N, 0)), np.zeros((0, Q)))

    @property
    def N(self) -> int:
        return self.spatial.shape[0]

    @property
    def Q(self) -> int:
        return self.coeffs.shape[1]

    @property
    def rank(self) -> int:
        return self.spatial.shape[1]

    def evaluate(self, q: int) -> np.ndarray:
        return evaluate_vector(self, q)

    def scaled(self, factor: float) -> "LowRankVectorFamily":
        return LowRankVectorFamily(self.spatial, factor * self.coeffs)

    def rows(self, idx) -> np.ndarray:
        """Values of the selected components at every sample (len(idx) x Q)."""
        return self.spatial[idx] @ self.coeffs

    def __add__(self, other):
        return add_families(self, other)

    def __sub__(self, other):
        return add_families(self, other.scaled(-1.0))


def evaluate_vector(fam: LowRankVectorFamily, q: int) -> np.ndarray:
    if not 0 <= q < fam.Q:
        raise IndexError(f"sample index {q} out of range [0, {fam.Q})")
    return fam.spatial @ fam.coeffs[:, q]


def global_norm(fam: LowRankVectorFamily, norm: NormSpec = EUCLIDEAN) -> float:
    """sqrt(sum_q ||v(xi_q)||_M^2) without assembling the N x Q matrix.

    The spatial factor is reduced to its triangular QR factor first, so the
    cost is O((N + Q) r^2) and cancellation between terms is resolved to
    working precision.
    """
    if fam.rank == 0:
        return 0.0
    return float(np.linalg.norm(_reduced_coeffs(fam, norm)))


def _reduced_coeffs(fam: LowRankVectorFamily, norm: NormSpec) -> np.ndarray:
    """Matrix B with ||B[:, q]|| = ||v(xi_q)||_M for every sample."""
    V = fam.spatial
    if not norm.is_euclidean:
        if norm.weight.shape[0] != fam.N:
            raise ValueError("weight matrix size does not match the family")
        V = norm.cholesky_factor().T @ V
    R = np.linalg.qr(V, mode="r")
    return R @ fam.coeffs


def add_families(a: LowRankVectorFamily, b: LowRankVectorFamily) -> LowRankVectorFamily:
    if a.N != b.N or a.Q != b.Q:
        raise ValueError(
            f"dimension mismatch: ({a.N}, {a.Q}) vs ({b.N}, {b.Q})"
        )
    return LowRankVectorFamily(
        np.hstack([a.spatial, b.spatial]), np.vstack([a.coeffs, b.coeffs])
    )


@dataclass(frozen=True)
class LowRankMatrixFamily:
    """Parameter-dependent matrix ``sum_i matrices[i] * coeffs[i, q]``.

    Sparse factors are kept in CSR format and are expected to share one
    sparsity pattern.
    """

    matrices: tuple
    coeffs: np.ndarray
    N: int = field(default=-1)

    def __post_init__(self):
        mats = tuple(m.tocsr() if sp.issparse(m) else np.asarray(m, dtype=float)
                     for m in self.matrices)
        C = np.asarray(self.coeffs, dtype=float)
        if C.ndim != 2 or C.shape[0] != len(mats):
            raise ValueError("coeffs must have one row per matrix factor")
        N = self.N
        for m in mats:
            if m.shape[0] != m.shape[1]:
                raise ValueError("matrix factors must be square")
            if N >= 0 and m.shape[0] != N:
                raise ValueError("matrix factors have inconsistent sizes")
            N = m.shape[0]
        if N < 0:
            raise ValueError("an empty matrix family needs an explicit N")
        object.__setattr__(self, "matrices", mats)
        object.__setattr__(self, "coeffs", C)
        object.__setattr__(self, "N", N)

    @property
    def Q(self) -> int:
        return self.coeffs.shape[1]

    @property
    def rank(self) -> int:
        return len(self.matrices)

    @property
    def is_sparse(self) -> bool:
        return all(sp.issparse(m) for m in self.matrices)

    def evaluate(self, q: int):
        if not 0 <= q < self.Q:
            raise IndexError(f"sample index {q} out of range [0, {self.Q})")
        if self.rank == 0:
            return sp.csr_matrix((self.N, self.N))
        if self.is_sparse and _same_pattern(self.matrices):
            out = self.matrices[0].copy()
            out.data = np.tensordot(
                self.coeffs[:, q], np.array([m.data for m in self.matrices]), axes=1
            )
            return out
        if self.is_sparse:
            return sum(m * c for m, c in zip(self.matrices, self.coeffs[:, q])).tocsr()
        return sum(_dense(m) * c for m, c in zip(self.matrices, self.coeffs[:, q]))


def _same_pattern(mats: Sequence) -> bool:
    first = mats[0]
    return all(
        m.nnz == first.nnz
        and np.array_equal(m.indptr, first.indptr)
        and np.array_equal(m.indices, first.indices)
        for m in mats[1:]
    )


class OracleLedger:
    """Counters for oracle evaluations of residuals and preconditioners."""

    FIELDS = (
        "residual_vector_calls",
        "residual_entry_calls",
        "precond_matrix_calls",
        "precond_entry_calls",
    )

    def __init__(self):
        self._lock = threading.Lock()
        self.residual_vector_calls = 0
        self.residual_entry_calls = 0
        self.precond_matrix_calls = 0
        self.precond_entry_calls = 0

    def add(self, name: str, count: int = 1) -> None:
        if name not in self.FIELDS:
            raise KeyError(name)
        if count < 0:
            raise ValueError("ledger counters never decrease")
        with self._lock:
            setattr(self, name, getattr(self, name) + int(count))

    def snapshot(self) -> dict:
        with self._lock:
            return {name: getattr(self, name) for name in self.FIELDS}

    def __repr__(self):
        body = ", ".join(f"{k}={v}" for k, v in self.snapshot().items())
        return f"OracleLedger({body})"


def parallel_map(fn: Callable, items: Iterable, threads: int = 1) -> list:
    """Ordered map; results never depend on the thread count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class SparsityPattern:
    """Admissible entry set of a sparse matrix family, in CSR order.

    Matrices on the pattern are flattened to their ``data`` vector, so the
    Euclidean inner product of flattened matrices is the Frobenius product.
    """

    def __init__(self, indptr, indices, N: int):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.N = int(N)
        self.rows = np.repeat(np.arange(self.N), np.diff(self.indptr))

    @classmethod
    def from_matrix(cls, A) -> "SparsityPattern":
        A = sp.csr_matrix(A)
        A.sort_indices()
        return cls(A.indptr.copy(), A.indices.copy(), A.shape[0])

    @property
    def nnz(self) -> int:
        return self.indices.size

    def pair(self, flat: int) -> tuple:
        return int(self.rows[flat]), int(self.indices[flat])

    def flat_index(self, i: int, j: int) -> int:
        start, stop = self.indptr[i], self.indptr[i + 1]
        pos = start + np.searchsorted(self.indices[start:stop], j)
        if pos >= stop or self.indices[pos] != j:
            raise KeyError(f"entry ({i}, {j}) is outside the pattern")
        return int(pos)

    def to_csr(self, data) -> sp.csr_matrix:
        return sp.csr_matrix(
            (np.asarray(data, dtype=float), self.indices.copy(), self.indptr.copy()),
            shape=(self.N, self.N),
        )

    def flatten(self, A) -> np.ndarray:
        """Entries of ``A`` on the pattern (entries outside it are ignored)."""
        A = sp.csr_matrix(A)
        if (A.nnz == self.nnz and np.array_equal(A.indptr, self.indptr)
                and np.array_equal(A.indices, self.indices)):
            return A.data.astype(float, copy=True)
        return np.asarray(A[self.rows, self.indices]).ravel()

    def __eq__(self, other):
        return (isinstance(other, SparsityPattern) and self.N == other.N
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    __hash__ = None
