import numpy as np
import pytest
import scipy.sparse as sp

from paramnewton.core import LowRankMatrixFamily, LowRankVectorFamily


def random_family(rng, N, Q, r, scale=1.0):
    return LowRankVectorFamily(rng.standard_normal((N, r)), scale * rng.standard_normal((r, Q)))


def dense(fam):
    """Explicit N x Q assembly, column by column."""
    out = np.zeros((fam.N, fam.Q))
    for q in range(fam.Q):
        for i in range(fam.rank):
            out[:, q] += fam.spatial[:, i] * fam.coeffs[i, q]
    return out


def stencil_pattern(n):
    T = sp.diags([np.ones(n - 1), np.ones(n), np.ones(n - 1)], [-1, 0, 1])
    I = sp.identity(n)
    A = sp.csr_matrix(sp.kron(I, T) + sp.kron(T, I))
    A.eliminate_zeros()
    A.sort_indices()
    return A


def random_spd_family(rng, N, Q, xi_scale=1.0):
    """P(xi) = K0 + xi K1 with K0 SPD dominant and K1 PSD, as a dense family."""
    B = rng.standard_normal((N, N))
    K0 = B @ B.T / N + 2.0 * np.eye(N)
    C = rng.standard_normal((N, 3))
    K1 = C @ C.T / N
    xi = xi_scale * rng.uniform(0.0, 1.0, Q)
    return LowRankMatrixFamily((K0, K1), np.vstack([np.ones(Q), xi]))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
