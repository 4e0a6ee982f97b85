"""No operation on factored families allocates an N x Q dense array."""

import tracemalloc

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import random_family
from paramnewton.core import LowRankMatrixFamily, global_norm
from paramnewton.eim_randomized import CertifiedStop, randomized_vector_eim
from paramnewton.rank_one import RankOneSolverConfig, greedy_solve
from paramnewton.truncation import Truncator, truncate

N, Q = 2000, 1000
DENSE_BYTES = 8 * N * Q


class _FactoredSource:
    """Residual source evaluated from factors, never assembled."""

    def __init__(self, fam):
        self.fam = fam

    n_rows = property(lambda self: self.fam.N)
    n_samples = property(lambda self: self.fam.Q)

    def column(self, q):
        return self.fam.evaluate(q)

    def entries(self, rows, qs):
        return np.einsum("kr,rk->k", self.fam.spatial[rows], self.fam.coeffs[:, qs])


def _peak(fn):
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


@pytest.fixture(scope="module")
def fam():
    return random_family(np.random.default_rng(0), N, Q, 6)


def test_norm_and_truncation(fam):
    assert N * Q > 1e6
    assert _peak(lambda: global_norm(fam + fam)) < DENSE_BYTES / 4
    assert _peak(lambda: truncate(fam + fam, Truncator(1e-10))) < DENSE_BYTES / 4


def test_greedy_solver(fam):
    K = sp.diags([-np.ones(N - 1), 4 * np.ones(N), -np.ones(N - 1)], [-1, 0, 1], format="csr")
    P = LowRankMatrixFamily((K, sp.identity(N, format="csr")),
                            np.vstack([np.ones(Q), np.linspace(0, 1, Q)]))
    cfg = RankOneSolverConfig(residual_tol=1e-6, max_rank=8, spd_mode=True)
    assert _peak(lambda: greedy_solve(P, fam, cfg=cfg)) < DENSE_BYTES / 4


def test_randomized_eim(fam):
    stop = CertifiedStop(1e-8, M=200, seed=1)
    itp = []
    assert _peak(lambda: itp.append(randomized_vector_eim(_FactoredSource(fam), stop, seed=2))) \
        < DENSE_BYTES / 4
    assert itp[0].rank == 6
