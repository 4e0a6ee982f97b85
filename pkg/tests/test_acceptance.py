"""Acceptance criteria, one test and one PASS/FAIL line per criterion."""

import functools
import time

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import random_spd_family, stencil_pattern
from paramnewton.cli import main
from paramnewton.core import LowRankMatrixFamily, LowRankVectorFamily, SparsityPattern
from paramnewton.eim_randomized import (DenseVectorSource, MatrixFamilySource, certify_error,
                                        randomized_matrix_eim, randomized_vector_eim)
from paramnewton.eim_weighted import CoefficientTable, lift_interpolant, weighted_eim
from paramnewton.newton import DriverOptions, ForcingSchedule, convergence_order, solve
from paramnewton.problems import make_problem
from paramnewton.rank_one import RankOneSolverConfig, als_objective, als_rank_one, greedy_solve
from paramnewton.truncation import Truncator, truncate

SEEDS = range(5)
N_GRID, Q = 31, 500


def _report(capsys, k, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'} | {detail}")


@functools.lru_cache(maxsize=None)
def _run(problem, schedule, seed, rho=None, eps_target=1e-9, max_iter=15):
    p = make_problem(problem, N_GRID, Q, seed)
    sch = ForcingSchedule(schedule) if rho is None else ForcingSchedule(schedule, rho, rho)
    cfg = RankOneSolverConfig(spd_mode=p.spd_precond)
    t0 = time.perf_counter()
    st = solve(p, sch, Truncator(1e-12), cfg,
               DriverOptions(eps_target=eps_target, max_iter=max_iter, seed=seed))
    return p, st, time.perf_counter() - t0


def _costs(p, st, known):
    from paramnewton.newton import normalized_costs
    return normalized_costs(st.ledger_history[-1], known, p.N, p.pattern.nnz, p.Q, st.iteration)


# 1 -------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_1_quadratic_convergence(capsys):
    ok, parts = True, []
    for seed in SEEDS:
        p, st, wall = _run("cubic", "quadratic_known", seed)
        orders = convergence_order(st.epsilon_history)[-2:]
        good = (st.converged and st.iteration <= 6 and st.epsilon_history[-1] < 1e-9
                and all(1.7 <= o <= 2.5 for o in orders) and wall < 60)
        ok &= good
        parts.append(f"seed {seed}: k={st.iteration} eps={st.epsilon_history[-1]:.2e} "
                     f"orders={orders[0]:.2f},{orders[1]:.2f} t={wall:.1f}s")
    _report(capsys, 1, ok, "; ".join(parts))
    assert ok


# 2 -------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_2_known_complexity(capsys):
    ok, parts = True, []
    for seed in SEEDS:
        p, st, _ = _run("cubic", "quadratic_known", seed)
        cr, cp = _costs(p, st, True)
        ok &= cr <= 0.05 and cp <= 0.02
        parts.append(f"seed {seed}: R {100 * cr:.2f}% P {100 * cp:.2f}%")
    _report(capsys, 2, ok, "bounds R<=5% P<=2%; " + "; ".join(parts))
    assert ok


# 3 -------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_3_blind_parity(capsys):
    parity, cheap, parts = True, True, []
    for seed in SEEDS:
        _, known, _ = _run("cubic", "quadratic_known", seed)
        p, blind, _ = _run("cubic", "quadratic_blind", seed)
        ratios = np.array(known.epsilon_history[:3]) / np.array(blind.epsilon_history[:3])
        parity &= bool(np.all((ratios >= 1 / 3) & (ratios <= 3)))
        cr, cp = _costs(p, blind, False)
        cheap &= cr <= 0.02 and cp <= 0.02
        parts.append(f"seed {seed}: ratios={','.join(f'{r:.2f}' for r in ratios)} "
                     f"R {100 * cr:.2f}% P {100 * cp:.2f}%")
    ok = parity and cheap
    _report(capsys, 3, ok, f"parity {'ok' if parity else 'violated'}, entry cost "
            f"{'ok' if cheap else 'above 2%'}; " + "; ".join(parts))
    assert ok


# 4 -------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_linear_forcing(capsys):
    conv, cheap, parts = True, True, []
    for seed in SEEDS:
        p, st, wall = _run("expdiff", "linear_blind", seed, rho=0.1, eps_target=1e-8,
                           max_iter=12)
        eps = st.epsilon_history
        monotone = all(b < a for a, b in zip(eps, eps[1:]))
        cr, cp = _costs(p, st, False)
        conv &= st.converged and eps[-1] <= 1e-8 and monotone
        cheap &= cr <= 0.02 and cp <= 0.02
        parts.append(f"seed {seed}: k={st.iteration} eps={eps[-1]:.2e} monotone={monotone} "
                     f"R {100 * cr:.2f}% P {100 * cp:.2f}% t={wall:.1f}s")
    ok = conv and cheap
    _report(capsys, 4, ok, f"convergence {'ok' if conv else 'violated'}, entry cost "
            f"{'ok' if cheap else 'above 2%'}; " + "; ".join(parts))
    assert ok


# 5 -------------------------------------------------------------------------------

def _exactness(seed):
    rng = np.random.default_rng(1000 + seed)
    k = 1 + seed % 8
    N, Qs = 30, 50
    # weighted: coefficient table of rank k with s = k + 2 rows
    G = rng.standard_normal((N, k + 2))
    gamma = rng.standard_normal((k + 2, k)) @ rng.standard_normal((k, Qs))
    R = G @ gamma
    itp = weighted_eim(CoefficientTable(gamma), G.T @ G, 0.0)
    fam = lift_interpolant(itp, lambda q: R[:, q])
    w_err = np.linalg.norm(R - fam.spatial @ fam.coeffs) / np.linalg.norm(R)
    # randomized vector
    Rv = rng.standard_normal((N, k)) @ rng.standard_normal((k, Qs))
    vi = randomized_vector_eim(DenseVectorSource(Rv), seed=seed)
    v_err = np.linalg.norm(Rv - vi.basis @ vi.coeffs) / np.linalg.norm(Rv)
    # randomized matrix on a five-point pattern
    A = stencil_pattern(5)
    mats = []
    for _ in range(k):
        m = A.copy()
        m.data = rng.standard_normal(m.nnz)
        mats.append(m)
    coeffs = rng.standard_normal((k, Qs))
    pat = SparsityPattern.from_matrix(A)
    src = MatrixFamilySource(lambda q: sum(c * m for c, m in zip(coeffs[:, q], mats)), pat, Qs)
    mi = randomized_matrix_eim(src, seed=seed)
    D = np.column_stack([pat.flatten(sum(c * m for c, m in zip(coeffs[:, q], mats)))
                         for q in range(Qs)])
    m_err = np.linalg.norm(D - mi.flat.basis @ mi.flat.coeffs) / np.linalg.norm(D)
    return k, (itp.rank, vi.rank, mi.rank), max(w_err, v_err, m_err)


def test_criterion_5_eim_exactness(capsys):
    ok, worst, bad = True, 0.0, []
    for seed in range(20):
        k, ranks, err = _exactness(seed)
        worst = max(worst, err)
        if ranks != (k, k, k) or err > 1e-10:
            ok = False
            bad.append(f"seed {seed} k={k} ranks={ranks} err={err:.1e}")
    _report(capsys, 5, ok, f"20 seeds, k=1..8, worst relative error {worst:.1e}"
            + ("; " + "; ".join(bad) if bad else ""))
    assert ok


# 6 -------------------------------------------------------------------------------

def test_criterion_6_error_identity(capsys):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(2000 + seed)
        N, s, Qs = int(rng.integers(10, 40)), int(rng.integers(3, 9)), int(rng.integers(20, 60))
        G = rng.standard_normal((N, s))
        gamma = rng.standard_normal((s, Qs))
        B = rng.standard_normal((N, N))
        M = B @ B.T / N + np.eye(N)
        R = G @ gamma
        itp = weighted_eim(CoefficientTable(gamma), G.T @ M @ G, 0.0,
                           max_rank=int(rng.integers(1, s)))
        fam = lift_interpolant(itp, lambda q: R[:, q])
        D = R - fam.spatial @ fam.coeffs
        lhs = np.sqrt(np.max(np.einsum("iq,ij,jq->q", D, M, D)))
        worst = max(worst, abs(lhs - itp.achieved_error) / itp.achieved_error)
    ok = worst <= 1e-10
    _report(capsys, 6, ok, f"50 instances, worst relative mismatch {worst:.1e} (bound 1e-10)")
    assert ok


# 7 -------------------------------------------------------------------------------

class _ZeroItp:
    def entry_values(self, rows, qs):
        return np.zeros(len(rows))


def test_criterion_7_certificate(capsys):
    E = np.random.default_rng(7).standard_normal((40, 60))
    src = DenseVectorSource(E)
    truth = np.linalg.norm(E)
    hits = sum(truth <= certify_error(_ZeroItp(), src, M=200, alpha=0.05, seed=k).e_bound
               for k in range(500))
    ys = np.array([certify_error(_ZeroItp(), src, M=200, alpha=0.05, seed=10**6 + k).mean
                   for k in range(1000)])
    se = ys.std(ddof=1) / np.sqrt(ys.size)
    z = abs(ys.mean() - truth**2) / se
    ok = hits / 500 >= 0.90 and z <= 3
    _report(capsys, 7, ok, f"coverage {hits / 500:.3f} (bound 0.90), "
            f"bias {z:.2f} standard errors (bound 3)")
    assert ok


# 8 -------------------------------------------------------------------------------

def test_criterion_8_rank_one_solver(capsys):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(3000 + seed)
        N, Qs = int(rng.integers(5, 31)), int(rng.integers(3, 21))
        P = random_spd_family(rng, N, Qs)
        R = LowRankVectorFamily(rng.standard_normal((N, 2)), rng.standard_normal((2, Qs)))
        res = greedy_solve(P, R, cfg=RankOneSolverConfig(residual_tol=1e-10, spd_mode=True))
        ref = np.column_stack([np.linalg.solve(P.evaluate(q), R.evaluate(q)) for q in range(Qs)])
        got = res.increment.spatial @ res.increment.coeffs
        worst = max(worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    rises = 0
    for seed in range(50):
        rng = np.random.default_rng(4000 + seed)
        N, Qs = int(rng.integers(4, 20)), int(rng.integers(3, 15))
        P = random_spd_family(rng, N, Qs)
        R = LowRankVectorFamily(rng.standard_normal((N, 3)), rng.standard_normal((3, Qs)))
        spd = bool(seed % 2)
        trace = []
        als_rank_one(P, R, cfg=RankOneSolverConfig(spd_mode=spd, max_als_sweeps=20,
                                                   als_stagnation_tol=1e-15), trace=trace)
        J = np.array([als_objective(P, R, w, t, spd_mode=spd) for w, t in trace[1:]])
        scale = abs(J).max() + np.linalg.norm(R.spatial @ R.coeffs) ** 2
        rises += int(np.any(np.diff(J) > 1e-12 * scale))
    ok = worst <= 1e-8 and rises == 0
    _report(capsys, 8, ok, f"20 SPD instances, worst relative error {worst:.1e} (bound 1e-8); "
            f"objective increases in {rises}/50 ALS runs")
    assert ok


# 9 -------------------------------------------------------------------------------

def test_criterion_9_truncation(capsys):
    worst = {}
    for eps in (1e-2, 1e-6, 1e-12):
        w = 0.0
        for seed in range(100):
            rng = np.random.default_rng(5000 + seed)
            N, Qs, r = int(rng.integers(1, 80)), int(rng.integers(1, 120)), int(rng.integers(1, 16))
            fam = LowRankVectorFamily(rng.standard_normal((N, r)) * np.logspace(0, -14, r),
                                      rng.standard_normal((r, Qs)))
            D = fam.spatial @ fam.coeffs
            out = truncate(fam, Truncator(eps))
            rel = np.linalg.norm(out.spatial @ out.coeffs - D) / np.linalg.norm(D)
            w = max(w, rel - eps)
        worst[eps] = w
    ok = all(v <= 1e-12 for v in worst.values())
    _report(capsys, 9, ok, "worst excess over eps: " +
            ", ".join(f"eps={e:.0e}: {v:.1e}" for e, v in worst.items()) + " (slack 1e-12)")
    assert ok


# 10 ------------------------------------------------------------------------------

def _strip_timing(text):
    lines = text.splitlines()
    head = next(i for i, l in enumerate(lines) if not l.startswith("#"))
    col = lines[head].split(",").index("wall_time")
    return "\n".join(l if l.startswith("#") else
                     ",".join(c for k, c in enumerate(l.split(",")) if k != col) for l in lines)


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path, capsys):
    same = []
    for args in (["--problem", "cubic", "--mode", "known"],
                 ["--problem", "expdiff", "--mode", "blind", "--n", "15", "--Q", "200"]):
        texts = []
        for k in range(2):
            out = tmp_path / f"r{k}.csv"
            main(["run", *args, "--out", str(out)])
            texts.append(_strip_timing(out.read_text(encoding="utf-8")).encode())
        same.append(texts[0] == texts[1])
    capsys.readouterr()
    ok = all(same)
    _report(capsys, 10, ok, f"cubic known identical={same[0]}, expdiff blind identical={same[1]}")
    assert ok
