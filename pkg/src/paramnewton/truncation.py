"""SVD re-compression of low-rank parameter-dependent vectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .core import EUCLIDEAN, LowRankVectorFamily, NormSpec

# singular values below this fraction of the largest one are always dropped
NOISE_FLOOR = 1e-15


@dataclass(frozen=True)
class Truncator:
    """Relative tolerance ``epsilon`` in the global L2 norm, optional rank cap."""

    epsilon: float = 1e-12
    max_rank: int | None = None

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.max_rank is not None and self.max_rank < 1:
            raise ValueError("max_rank must be a positive integer")

    def __call__(self, fam: LowRankVectorFamily, norm: NormSpec = EUCLIDEAN):
        return truncate(fam, self, norm)


class TruncationResult(NamedTuple):
    family: LowRankVectorFamily
    singular_values: np.ndarray
    discarded: float  # global norm of the dropped part


def truncate(fam: LowRankVectorFamily, t: Truncator,
             norm: NormSpec = EUCLIDEAN) -> LowRankVectorFamily:
    """Smallest-rank family within ``t.epsilon`` of ``fam`` in relative global norm.

    The returned spatial factors are orthonormal for the inner product of
    ``norm``.
    """
    return svd_truncate(fam, t, norm).family


def svd_truncate(fam: LowRankVectorFamily, t: Truncator,
                 norm: NormSpec = EUCLIDEAN) -> TruncationResult:
    N, Q = fam.N, fam.Q
    if fam.rank == 0:
        return TruncationResult(LowRankVectorFamily.zeros(N, Q), np.zeros(0), 0.0)

    if norm.is_euclidean:
        Qv, Rv = scipy.linalg.qr(fam.spatial, mode="economic")
    else:
        L = norm.cholesky_factor()
        Qv, Rv = scipy.linalg.qr(L.T @ fam.spatial, mode="economic")
    U, s, Wt = scipy.linalg.svd(Rv @ fam.coeffs, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return TruncationResult(LowRankVectorFamily.zeros(N, Q), s, 0.0)

    k = _select_rank(s, t.epsilon)
    if t.max_rank is not None:
        k = min(k, t.max_rank)

    spatial = Qv @ U[:, :k]
    if not norm.is_euclidean:
        spatial = scipy.linalg.solve_triangular(L.T, spatial, lower=False)
    coeffs = s[:k, None] * Wt[:k]
    discarded = float(np.sqrt(np.sum(s[k:] ** 2)))
    return TruncationResult(LowRankVectorFamily(spatial, coeffs), s, discarded)


def _select_rank(s: np.ndarray, epsilon: float) -> int:
    energy = s**2
    # tail[k] = sum_{i >= k} s_i^2, computed from the small end for accuracy
    tail = np.append(np.cumsum(energy[::-1])[::-1], 0.0)
    budget = epsilon**2 * tail[0]
    k = int(np.argmax(tail <= budget))
    k = max(k, 1)
    k = min(k, int(np.sum(s > NOISE_FLOOR * s[0])))
    return max(k, 1)
