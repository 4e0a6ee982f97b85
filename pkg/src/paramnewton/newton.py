"""Truncated inexact Newton iteration over a finite sample set.

Each iteration builds low-rank approximations of the preconditioner and the
residual, solves for a low-rank increment with the greedy rank-one solver and
re-compresses the iterate.  All interpolation tolerances are expressed
relative to the initial residual so that they do not depend on the scaling
of the discretization.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import EUCLIDEAN, LowRankMatrixFamily, LowRankVectorFamily, global_norm
from .eim_randomized import CertifiedStop, randomized_matrix_eim, randomized_vector_eim
from .eim_weighted import (CoefficientTable, lift_interpolant, recover_gram, reduce_rank,
                           weighted_eim)
from .rank_one import RankOneSolverConfig, SolverError, greedy_solve
from .truncation import Truncator, svd_truncate

log = logging.getLogger(__name__)

MODES = ("quadratic_known", "quadratic_blind", "linear_blind")


@dataclass(frozen=True)
class ForcingSchedule:
    """Forcing constants tying interpolation tolerances to the residual.

    ``quadratic_known`` interpolates the residual to a sup-norm error
    (rho_R / sqrt(Q)) ||R||^2 using the known structure; the blind modes use
    the certified bound e <= rho_R Z^2 (quadratic) or e <= rho_R Z (linear),
    where Z estimates ||R||.  Preconditioners are interpolated to a relative
    Frobenius error rho_P * epsilon.
    """

    mode: str = "quadratic_known"
    rho_R: float = 1e-2
    rho_P: float = 1e-2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown forcing mode {self.mode!r}; expected one of {MODES}")
        if not (self.rho_R > 0 and self.rho_P > 0):
            raise ValueError("forcing constants must be positive")

    @property
    def known(self) -> bool:
        return self.mode == "quadratic_known"


@dataclass(frozen=True)
class DriverOptions:
    """Stopping rule and interpolation settings of the outer loop.

    ``probes`` is the number M of random entries of each error certificate
    (default Q).  ``probe_tol`` is the relative sup-norm level, in units of
    the largest initial residual entry, below which a probed residual error
    counts as zero.  ``reduce_tol`` bounds the relative tolerance used to
    compress known coefficient tables.

    With a positive ``trunc_forcing`` c the iterate is truncated at relative
    accuracy max(trunc.epsilon, c eps^2), and with a positive
    ``solver_forcing`` c the linear solver stops at relative residual
    max(cfg.residual_tol, c eps), where eps is the current residual estimate.
    Both keep the perturbations of the order required for quadratic
    convergence while avoiding ranks the iteration does not need; setting
    them to zero gives fixed tolerances.
    """

    eps_target: float = 1e-9
    max_iter: int = 15
    alpha: float = 0.05
    probes: int | None = None
    probe_tol: float = 1e-10
    reduce_tol: float = 1e-12
    trunc_forcing: float = 1e-2
    solver_forcing: float = 1e-2
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.eps_target <= 0 or self.max_iter < 1:
            raise ValueError("eps_target must be positive and max_iter at least 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.probes is not None and self.probes < 2:
            raise ValueError("at least two probes are required")


@dataclass
class IterationRecord:
    iteration: int
    epsilon: float
    residual_rank: int
    precond_rank: int
    increment_rank: int
    iterate_rank: int
    solver_ratio: float
    truncation_error: float
    ledger: dict
    wall_time: float


@dataclass
class NewtonState:
    iterate: LowRankVectorFamily
    iteration: int = 0
    epsilon_history: list = field(default_factory=list)
    ledger_history: list = field(default_factory=list)
    rank_history: list = field(default_factory=list)
    records: list = field(default_factory=list)
    baseline: float = 0.0
    converged: bool = False
    reason: str = ""


def epsilon_estimate(residual_itp: LowRankVectorFamily, baseline: float, norm=EUCLIDEAN) -> float:
    """Global norm of the residual interpolant relative to the initial one."""
    if not baseline > 0:
        raise ValueError("the initial residual vanishes; the problem is degenerate")
    return global_norm(residual_itp, norm) / baseline


def convergence_order(eps_history) -> list:
    """Estimates log(e_{k+1}/e_k) / log(e_k/e_{k-1}) for every interior k."""
    e = np.asarray(eps_history, dtype=float)
    if e.size < 3:
        raise ValueError("at least three values are needed")
    if np.any(e <= 0) or not np.all(np.isfinite(e)):
        raise ValueError("error history must be positive and finite")
    le = np.log(e)
    d = np.diff(le)
    return list(d[1:] / d[:-1])


def normalized_costs(ledger: dict, mode_known: bool, N: int, nnz: int, Q: int, k: int):
    """Oracle cost relative to solving every sample for k iterations."""
    if mode_known:
        return (ledger["residual_vector_calls"] / (Q * k),
                ledger["precond_matrix_calls"] / (Q * k))
    cost_R = (ledger["residual_entry_calls"] + N * ledger["residual_vector_calls"]) / (N * Q * k)
    cost_P = (ledger["precond_entry_calls"] + nnz * ledger["precond_matrix_calls"]) / (nnz * Q * k)
    return cost_R, cost_P


def _seed(seed: int, *keys) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


class _Interpolator:
    """Builds residual and preconditioner approximations for one run."""

    def __init__(self, problem, schedule: ForcingSchedule, opts: DriverOptions):
        self.problem = problem
        self.schedule = schedule
        self.opts = opts
        self.Q = problem.Q
        self.M = opts.probes if opts.probes is not None else problem.Q
        self.baseline = None
        self.probe_tol = None

    # known structure ---------------------------------------------------------
    def _known(self, table, oracle, rel_target):
        """Reduced table, recovered Gram data and the global norm of G gamma."""
        tol = min(max(self.opts.reduce_tol, 0.1 * rel_target), 1e-2)
        reduced, _ = reduce_rank(CoefficientTable(table), tol)
        gram = recover_gram(reduced, oracle, threads=self.opts.threads)
        # global norm of G gamma from the Gram matrix, no extra evaluation
        total = float(np.sqrt(max(np.einsum("iq,ij,jq->", reduced.gamma, gram.W,
                                            reduced.gamma), 0.0)))
        return reduced, gram, total

    def residual(self, u: LowRankVectorFamily, k: int, eps_prev: float):
        p = self.problem
        if self.schedule.known:
            gamma, _ = p.structure(u.coeffs)
            scale = self.baseline if self.baseline is not None else 1.0
            # relative target of the sup-norm error, in units of the baseline
            rel = self.schedule.rho_R / np.sqrt(self.Q) * eps_prev**2
            oracle = lambda q: p.residual_full(u.evaluate(q), q)
            reduced, gram, total = self._known(gamma, oracle, rel)
            if self.baseline is None:
                scale = total
            eps = total / scale
            zeta = self.schedule.rho_R / np.sqrt(self.Q) * eps**2 * scale
            itp = weighted_eim(reduced, gram.W, zeta)
            return lift_interpolant(itp, gram=gram), total, itp.rank

        src = p.residual_source(u)
        power = 2 if self.schedule.mode == "quadratic_blind" else 1
        stop = CertifiedStop(self.schedule.rho_R, power=power, scale=self.baseline,
                             M=self.M, alpha=self.opts.alpha,
                             probe_tol=self.probe_tol or 0.0, seed=_seed(self.opts.seed, k, 1))
        itp = randomized_vector_eim(src, stop, seed=_seed(self.opts.seed, k, 2))
        if self.probe_tol is None:
            self.probe_tol = self.opts.probe_tol * float(
                np.max(np.abs(stop.last.probes.values), initial=0.0))
        return itp.to_family(), stop.last.z_norm, itp.rank

    def precond(self, u: LowRankVectorFamily, k: int, eps: float) -> LowRankMatrixFamily:
        p = self.problem
        pattern = p.pattern
        rho = self.schedule.rho_P * min(eps, 1.0)
        if self.schedule.known:
            _, phi = p.structure(u.coeffs)
            oracle = lambda q: self._precond_flat(u, q)
            reduced, gram, total = self._known(phi, oracle, rho / np.sqrt(self.Q))
            itp = weighted_eim(reduced, gram.W, rho / np.sqrt(self.Q) * total)
            flat = lift_interpolant(itp, gram=gram)
            mats = tuple(pattern.to_csr(flat.spatial[:, j]) for j in range(flat.rank))
            return LowRankMatrixFamily(mats, flat.coeffs, N=p.N)
        src = p.precond_source(u)
        stop = CertifiedStop(rho, power=1, M=self.M, alpha=self.opts.alpha,
                             seed=_seed(self.opts.seed, k, 3))
        return randomized_matrix_eim(src, stop, seed=_seed(self.opts.seed, k, 4)).to_family()

    def _precond_flat(self, u, q):
        p = self.problem
        p.ledger.add("precond_matrix_calls")
        return p.precond_data(u.evaluate(q), q)


def solve(problem, schedule: ForcingSchedule = ForcingSchedule(),
          trunc: Truncator = Truncator(1e-12),
          cfg: RankOneSolverConfig | None = None,
          opts: DriverOptions = DriverOptions()) -> NewtonState:
    """Run the truncated inexact Newton method from u = 0.

    Returns the final state; on a failure of the linear solver the state
    reached so far is returned with ``reason`` describing the failure.
    """
    if schedule.known and not getattr(problem, "has_structure", False):
        raise ValueError(
            f"problem {problem.name!r} has no known low-rank structure; use a blind mode"
        )
    if cfg is None:
        cfg = RankOneSolverConfig(spd_mode=problem.spd_precond)
    N, Q = problem.N, problem.Q
    interp = _Interpolator(problem, schedule, opts)
    u = LowRankVectorFamily.zeros(N, Q)
    state = NewtonState(iterate=u)

    R, base, _ = interp.residual(u, 0, 1.0)
    if not base > 0:
        raise ValueError("the initial residual vanishes; the problem is degenerate")
    interp.baseline = base
    state.baseline = base
    eps = 1.0
    log.info("baseline residual norm %.6e", base)

    for k in range(1, opts.max_iter + 1):
        t0 = time.perf_counter()
        P = interp.precond(u, k, eps)
        cfg_k = cfg
        if opts.solver_forcing > 0:
            cfg_k = replace(cfg, residual_tol=max(cfg.residual_tol, opts.solver_forcing * eps))
        try:
            res = greedy_solve(P, R, cfg=cfg_k)
        except SolverError as exc:
            state.reason = f"linear solver failed at iteration {k}: {exc}"
            log.warning(state.reason)
            return state
        full = u + res.increment
        trunc_k = trunc
        if opts.trunc_forcing > 0:
            trunc_k = replace(trunc, epsilon=min(1.0, max(trunc.epsilon,
                                                          opts.trunc_forcing * eps**2)))
        tr = svd_truncate(full, trunc_k)
        u = tr.family
        R, _, r_rank = interp.residual(u, k, eps)
        eps = epsilon_estimate(R, base)
        if not np.isfinite(eps):
            raise FloatingPointError(f"non-finite residual estimate at iteration {k}")
        ledger = problem.ledger.snapshot()
        state.iteration = k
        state.iterate = u
        state.epsilon_history.append(eps)
        state.ledger_history.append(ledger)
        state.rank_history.append(u.rank)
        state.records.append(IterationRecord(
            iteration=k, epsilon=eps, residual_rank=r_rank, precond_rank=P.rank,
            increment_rank=res.increment.rank, iterate_rank=u.rank,
            solver_ratio=res.residual_ratio, truncation_error=tr.discarded,
            ledger=ledger, wall_time=time.perf_counter() - t0,
        ))
        log.info("iteration %d: eps=%.3e rank(u)=%d rank(R)=%d rank(P)=%d", k, eps, u.rank,
                 r_rank, P.rank)
        if eps <= opts.eps_target:
            state.converged = True
            state.reason = "eps_target"
            return state
    state.reason = "max_iter"
    return state
