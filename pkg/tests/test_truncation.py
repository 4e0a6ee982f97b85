import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import dense, random_family
from paramnewton.core import LowRankVectorFamily, NormSpec, global_norm
from paramnewton.truncation import Truncator, svd_truncate, truncate


def _graded_family(rng, N, Q, sv):
    U, _ = np.linalg.qr(rng.standard_normal((N, len(sv))))
    V, _ = np.linalg.qr(rng.standard_normal((Q, len(sv))))
    return LowRankVectorFamily(U * sv, V.T)


def test_rank_one_is_kept(rng):
    fam = random_family(rng, 10, 8, 1)
    out = truncate(fam, Truncator(1e-3))
    assert out.rank == 1
    np.testing.assert_allclose(dense(out), dense(fam), atol=1e-13)


def test_explicit_singular_values(rng):
    fam = _graded_family(rng, 20, 15, [10.0, 1.0, 1e-8])
    res = svd_truncate(fam, Truncator(1e-4))
    assert res.family.rank == 2
    np.testing.assert_allclose(res.singular_values, [10.0, 1.0, 1e-8], rtol=1e-6)
    err = global_norm(res.family - fam)
    assert err <= 1e-4 * global_norm(fam)
    assert res.discarded == pytest.approx(1e-8, rel=1e-5)


def test_epsilon_one_gives_rank_one(rng):
    fam = random_family(rng, 12, 9, 4)
    out = truncate(fam, Truncator(1.0))
    assert out.rank == 1
    assert global_norm(out - fam) <= global_norm(fam) * (1 + 1e-12)


def test_zero_family():
    out = truncate(LowRankVectorFamily.zeros(5, 4), Truncator(1e-3))
    assert out.rank == 0
    out = truncate(LowRankVectorFamily(np.zeros((5, 2)), np.ones((2, 4))), Truncator(1e-3))
    assert out.rank == 0


def test_max_rank(rng):
    fam = random_family(rng, 15, 12, 6)
    assert truncate(fam, Truncator(1e-12, max_rank=3)).rank == 3


def test_validation():
    for eps in (0.0, -1.0, 1.5):
        with pytest.raises(ValueError):
            Truncator(eps)
    with pytest.raises(ValueError):
        Truncator(1e-3, max_rank=0)


@settings(max_examples=60, deadline=None)
@given(N=st.integers(1, 100), Q=st.integers(1, 200), r=st.integers(1, 20),
       eps=st.sampled_from([1e-2, 1e-6, 1e-12]), seed=st.integers(0, 2**32 - 1))
def test_truncation_bound(N, Q, r, eps, seed):
    rng = np.random.default_rng(seed)
    # graded spectrum so every tolerance cuts somewhere
    sv = np.logspace(0, -14, r)
    fam = _graded_family(rng, max(N, r), max(Q, r), sv) if min(N, Q) < r else \
        LowRankVectorFamily(rng.standard_normal((N, r)) * sv, rng.standard_normal((r, Q)))
    out = truncate(fam, Truncator(eps))
    ref = np.linalg.norm(dense(fam))
    err = np.linalg.norm(dense(out) - dense(fam))
    assert err <= (eps + 1e-12) * ref
    # smallest rank: dropping one more term would violate the bound
    s = np.linalg.svd(dense(fam), compute_uv=False)
    if out.rank > 1:
        tail = np.sqrt(np.sum(s[out.rank - 1:] ** 2))
        assert tail > eps * ref * (1 - 1e-6) or s[out.rank - 1] <= 1e-15 * s[0] * 10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps=st.sampled_from([1e-2, 1e-6, 1e-12]))
def test_idempotent_and_orthonormal(seed, eps):
    rng = np.random.default_rng(seed)
    fam = LowRankVectorFamily(rng.standard_normal((40, 12)) * np.logspace(0, -13, 12),
                              rng.standard_normal((12, 30)))
    once = truncate(fam, Truncator(eps))
    twice = truncate(once, Truncator(eps))
    V = once.spatial
    assert np.max(np.abs(V.T @ V - np.eye(once.rank))) <= 1e-12
    assert np.linalg.norm(dense(twice) - dense(once)) <= 1e-12 * np.linalg.norm(dense(once))


def test_weighted_truncation(rng):
    B = rng.standard_normal((10, 10))
    M = B @ B.T + np.eye(10)
    norm = NormSpec.weighted(M)
    fam = LowRankVectorFamily(rng.standard_normal((10, 5)) * np.logspace(0, -6, 5),
                              rng.standard_normal((5, 8)))
    out = truncate(fam, Truncator(1e-3), norm)
    assert global_norm(out - fam, norm) <= 1e-3 * global_norm(fam, norm)
    V = out.spatial
    np.testing.assert_allclose(V.T @ M @ V, np.eye(out.rank), atol=1e-12)
