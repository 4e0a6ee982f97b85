"""Greedy rank-one solver for P(xi) du(xi) = R(xi) with low-rank P and R.

Each correction w theta(xi) minimizes sum_xi ||P(xi) w theta(xi) - R_r(xi)||_M^2
by alternating closed-form updates of w (one N x N sparse solve) and theta
(one scalar per sample).  In SPD mode the parameter-dependent metric
M = P(xi)^{-1} is used, which turns the w-update into a Galerkin system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import EUCLIDEAN, LowRankMatrixFamily, LowRankVectorFamily, NormSpec, global_norm
from .truncation import Truncator, truncate

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class RankOneSolverConfig:
    residual_tol: float = 1e-12
    stagnation_tol: float = 1e-12
    max_rank: int = 100
    max_als_sweeps: int = 50
    als_stagnation_tol: float = 1e-6
    spd_mode: bool = False
    update_coefficients: bool = False
    recompress_eps: float = 1e-14

    def __post_init__(self):
        for name in ("residual_tol", "stagnation_tol", "als_stagnation_tol", "recompress_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_rank < 1 or self.max_als_sweeps < 1:
            raise ValueError("max_rank and max_als_sweeps must be at least 1")


@dataclass
class GreedyResult:
    increment: LowRankVectorFamily
    residual_history: list
    converged: bool
    reason: str
    sweeps: list = field(default_factory=list)

    @property
    def residual_ratio(self) -> float:
        r0 = self.residual_history[0]
        return self.residual_history[-1] / r0 if r0 > 0 else 0.0


def apply_operator(P: LowRankMatrixFamily, v: LowRankVectorFamily) -> LowRankVectorFamily:
    """The family P(xi) v(xi), of rank p * r_v."""
    if P.N != v.N or P.Q != v.Q:
        raise ValueError("operator and vector families have inconsistent sizes")
    p, r = P.rank, v.rank
    if p == 0 or r == 0:
        return LowRankVectorFamily.zeros(v.N, v.Q)
    spatial = np.hstack([np.asarray(F @ v.spatial) for F in P.matrices])
    coeffs = (P.coeffs[:, None, :] * v.coeffs[None, :, :]).reshape(p * r, v.Q)
    return LowRankVectorFamily(spatial, coeffs)


class _SparseCombination:
    """Fast assembly of sum_k c_k A_k for a fixed list of matrices."""

    def __init__(self, mats):
        self.N = mats[0].shape[0]
        self.sparse = all(sp.issparse(m) for m in mats)
        if not self.sparse:
            self.stack = np.array([m.toarray() if sp.issparse(m) else np.asarray(m)
                                   for m in mats])
            return
        coos = [sp.coo_matrix(m) for m in mats]
        keys = [c.row.astype(np.int64) * self.N + c.col for c in coos]
        union = np.unique(np.concatenate(keys)) if keys else np.zeros(0, np.int64)
        self.rows = union // self.N
        self.cols = union % self.N
        self.data = np.zeros((len(mats), union.size))
        for k, (c, key) in enumerate(zip(coos, keys)):
            np.add.at(self.data[k], np.searchsorted(union, key), c.data)
        self.indptr = np.searchsorted(self.rows, np.arange(self.N + 1))

    def combine(self, c):
        c = np.asarray(c, dtype=float).ravel()
        if not self.sparse:
            return np.tensordot(c, self.stack, axes=1)
        data = c @ self.data
        return sp.csc_matrix(
            sp.csr_matrix((data, self.cols, self.indptr), shape=(self.N, self.N))
        )


def _solve(A, b):
    try:
        if sp.issparse(A):
            x = spla.spsolve(A, b)
        else:
            x = scipy.linalg.solve(A, b, assume_a="sym")
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        raise SolverError(f"singular system in the w-update: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SolverError("singular system in the w-update")
    return x


class _Operator:
    """Precomputed products of the operator factors for the ALS updates."""

    def __init__(self, P: LowRankMatrixFamily, norm: NormSpec, spd_mode: bool):
        self.P = P
        self.norm = norm
        self.spd = spd_mode
        self.mats = P.matrices
        self.phi = P.coeffs
        p = P.rank
        if spd_mode:
            self.assembly = _SparseCombination(list(self.mats))
        else:
            prods = []  # F_i^T M F_j, row-major in (i, j)
            for i in range(p):
                MFi = self._apply_norm(self.mats[i])
                for j in range(p):
                    prods.append(MFi.T @ self.mats[j])
            self.assembly = _SparseCombination(prods)

    def _apply_norm(self, F):
        if self.norm.is_euclidean:
            return F
        M = self.norm.weight
        out = M @ F
        return sp.csr_matrix(out) if sp.issparse(F) and not sp.issparse(out) else out

    def system(self, theta, rhs: LowRankVectorFamily):
        """A and b of the w-update for fixed theta."""
        phi = self.phi
        if self.spd:
            A = self.assembly.combine(phi @ theta**2)
            b = rhs.spatial @ (rhs.coeffs @ theta)
            return A, b
        c = (phi * theta**2) @ phi.T
        A = self.assembly.combine(c.ravel())
        T = rhs.coeffs @ (phi * theta).T  # s x p
        Y = self.norm.apply(rhs.spatial @ T)  # N x p
        b = sum(np.asarray(F.T @ Y[:, i]).ravel() for i, F in enumerate(self.mats))
        return A, b

    def applied(self, w):
        """N x p matrix with columns F_i w."""
        return np.column_stack([np.asarray(F @ w).ravel() for F in self.mats])

    def theta_terms(self, w, rhs: LowRankVectorFamily):
        """Per-sample numerator and denominator of the theta-update."""
        phi = self.phi
        Fw = self.applied(w)
        if self.spd:
            num = (w @ rhs.spatial) @ rhs.coeffs
            den = phi.T @ (Fw.T @ w)
            return num, den
        MFw = self.norm.apply(Fw)
        H = MFw.T @ Fw
        K = MFw.T @ rhs.spatial
        num = np.sum(phi * (K @ rhs.coeffs), axis=0)
        den = np.einsum("iq,ij,jq->q", phi, H, phi)
        return num, den


def als_rank_one(P, rhs: LowRankVectorFamily, norm: NormSpec = EUCLIDEAN,
                 cfg: RankOneSolverConfig = RankOneSolverConfig(), trace: list | None = None,
                 operator: _Operator | None = None, seed: int = 0):
    """Alternating minimization for one rank-one correction (w, theta).

    ``trace``, if given, receives ``(w, theta)`` after every half-sweep.
    """
    op = operator if operator is not None else _Operator(P, norm, cfg.spd_mode)
    Q = rhs.Q
    theta = np.ones(Q)
    w = None
    perturbed = False
    prev = None
    for sweep in range(cfg.max_als_sweeps):
        A, b = op.system(theta, rhs)
        w = _solve(A, b)
        if trace is not None:
            trace.append((w.copy(), theta.copy()))
        num, den = op.theta_terms(w, rhs)
        if op.spd:
            bad = np.flatnonzero(~(den > 0))
            if bad.size and np.any(w):
                raise SolverError(
                    f"operator is not positive definite at sample {int(bad[0])} "
                    f"(w^T P w = {den[bad[0]]:.3e})"
                )
        safe = den > 0
        theta = np.where(safe, num / np.where(safe, den, 1.0), 0.0)
        if trace is not None:
            trace.append((w.copy(), theta.copy()))
        if not np.any(theta):
            if perturbed:
                raise SolverError(
                    "alternating minimization produced a zero correction twice; "
                    "the normal matrix is singular"
                )
            perturbed = True
            theta = np.random.default_rng(seed).standard_normal(Q)
            prev = None
            continue
        # normalize w, push the scale into theta
        scale = np.linalg.norm(w)
        w = w / scale
        theta = theta * scale
        if prev is not None:
            pw, pt = prev
            n_new = np.dot(theta, theta)
            n_old = np.dot(pt, pt)
            cross = np.dot(w, pw) * np.dot(theta, pt)
            change = np.sqrt(max(n_new + n_old - 2.0 * cross, 0.0))
            if change <= cfg.als_stagnation_tol * np.sqrt(n_new):
                return w, theta, sweep + 1
        prev = (w, theta)
    return w, theta, cfg.max_als_sweeps


def als_objective(P: LowRankMatrixFamily, rhs: LowRankVectorFamily, w, theta,
                  norm: NormSpec = EUCLIDEAN, spd_mode: bool = False) -> float:
    """Objective of the rank-one problem, evaluated from the factors."""
    op = _Operator(P, norm, spd_mode)
    num, den = op.theta_terms(w, rhs)
    J = float(np.sum(theta**2 * den) - 2.0 * np.sum(theta * num))
    if not spd_mode:
        J += global_norm(rhs, norm) ** 2
    return J


def _update_coefficients(op: _Operator, W: np.ndarray, rhs: LowRankVectorFamily):
    """Jointly re-solve all theta's by per-sample projection on span(W)."""
    phi = op.phi
    FW = [np.asarray(F @ W) for F in op.mats]
    k = W.shape[1]
    if op.spd:
        blocks = np.array([W.T @ X for X in FW])  # p x k x k
        A = np.einsum("iq,ikl->qkl", phi, blocks)
        b = ((W.T @ rhs.spatial) @ rhs.coeffs).T
    else:
        MFW = [op.norm.apply(X) for X in FW]
        H = np.array([[MFW[i].T @ FW[j] for j in range(len(FW))] for i in range(len(FW))])
        A = np.einsum("iq,jq,ijkl->qkl", phi, phi, H)
        K = np.array([X.T @ rhs.spatial for X in MFW])  # p x k x s
        b = np.einsum("iq,iks,sq->qk", phi, K, rhs.coeffs)
    theta = np.empty((k, phi.shape[1]))
    for q in range(phi.shape[1]):
        theta[:, q] = np.linalg.lstsq(A[q], b[q], rcond=None)[0]
    return theta


def greedy_solve(P: LowRankMatrixFamily, R: LowRankVectorFamily,
                 norm: NormSpec = EUCLIDEAN,
                 cfg: RankOneSolverConfig = RankOneSolverConfig()) -> GreedyResult:
    """Low-rank approximation of P(xi)^{-1} R(xi) by greedy rank-one corrections.

    Stops when the global residual norm drops below ``residual_tol`` times
    its initial value, when a correction is smaller than ``stagnation_tol``
    times the current increment, or after ``max_rank`` corrections.
    """
    if P.N != R.N or P.Q != R.Q:
        raise ValueError("operator and right-hand side have inconsistent sizes")
    N, Q = R.N, R.Q
    r0 = global_norm(R, norm)
    history = [r0]
    if r0 == 0.0:
        return GreedyResult(LowRankVectorFamily.zeros(N, Q), history, True, "zero rhs")

    op = _Operator(P, norm, cfg.spd_mode)
    cap = 3 * (R.rank + P.rank)
    recompress = Truncator(cfg.recompress_eps)
    ws, thetas, sweeps = [], [], []
    rhs = R
    reason = "max_rank"
    converged = False
    for r in range(cfg.max_rank):
        w, theta, n_sweeps = als_rank_one(P, rhs, norm, cfg, operator=op, seed=r)
        sweeps.append(n_sweeps)
        ws.append(w)
        thetas.append(theta)
        W = np.column_stack(ws)
        if cfg.update_coefficients:
            Theta = _update_coefficients(op, W, R)
            thetas = list(Theta)
            du = LowRankVectorFamily(W, Theta)
            rhs = R - apply_operator(P, du)
        else:
            du = LowRankVectorFamily(W, np.vstack(thetas))
            step = LowRankVectorFamily(w[:, None], theta[None, :])
            rhs = rhs - apply_operator(P, step)
        if rhs.rank > cap:
            rhs = truncate(rhs, recompress)
        res = global_norm(rhs, norm)
        history.append(res)
        if res <= cfg.residual_tol * r0:
            converged, reason = True, "residual"
            break
        du_norm = np.linalg.norm(np.linalg.qr(W, mode="r") @ np.vstack(thetas))
        if np.linalg.norm(theta) <= cfg.stagnation_tol * du_norm:
            reason = "stagnation"
            break
    log.debug("greedy solve: %d corrections, residual ratio %.3e (%s)",
              len(ws), history[-1] / r0, reason)
    return GreedyResult(LowRankVectorFamily(np.column_stack(ws), np.vstack(thetas)),
                        history, converged, reason, sweeps)
