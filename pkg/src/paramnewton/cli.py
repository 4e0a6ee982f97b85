"""Command-line runner for the benchmark problems.

``paramnewton run`` solves one benchmark and writes a CSV report;
``paramnewton compare`` puts two reports side by side.

Exit codes: 0 converged (or reports agree), 2 iteration limit reached (or
reports diverge), 1 error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import asdict, dataclass, fields

from .newton import DriverOptions, ForcingSchedule, convergence_order, solve
from .problems import PROBLEMS, make_problem
from .rank_one import RankOneSolverConfig
from .report import build_reports, format_table, read_csv, write_csv
from .truncation import Truncator

log = logging.getLogger("paramnewton")

DEFAULT_RHO = {"cubic": 1e-2, "expdiff": 0.1}
BLIND_SCHEDULE = {"cubic": "quadratic_blind", "expdiff": "linear_blind"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    problem: str = "cubic"
    mode: str = "known"
    n: int = 31
    Q: int = 500
    seed: int = 7
    rho_r: float | None = None
    rho_p: float | None = None
    trunc_eps: float = 1e-12
    solver_tol: float = 1e-12
    eps_target: float = 1e-9
    max_iter: int = 15
    alpha: float = 0.05
    probes: int | None = None
    probe_tol: float = 1e-10
    trunc_forcing: float = 1e-2
    solver_forcing: float = 1e-2
    threads: int = 1
    out: str | None = None

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {sorted(PROBLEMS)}, got {self.problem!r}")
        if self.mode not in ("known", "blind"):
            raise ConfigError(f"mode must be 'known' or 'blind', got {self.mode!r}")
        if self.mode == "known" and self.problem == "expdiff":
            raise ConfigError(
                "expdiff has no known low-rank structure: the exponential nonlinearity "
                "gives no affine expansion of the residual or preconditioner; use --mode blind"
            )
        if self.n < 3 or self.Q < 1 or self.max_iter < 1 or self.threads < 1:
            raise ConfigError("n must be >= 3, Q, max_iter and threads must be >= 1")
        for name in ("rho_r", "rho_p"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.trunc_eps <= 1:
            raise ConfigError("trunc_eps must lie in (0, 1]")
        if not (self.solver_tol > 0 and self.eps_target > 0):
            raise ConfigError("solver_tol and eps_target must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.probes is not None and self.probes < 2:
            raise ConfigError("probes must be at least 2")
        if min(self.probe_tol, self.trunc_forcing, self.solver_forcing) < 0:
            raise ConfigError("probe_tol, trunc_forcing and solver_forcing must be nonnegative")

    @property
    def schedule(self) -> ForcingSchedule:
        mode = "quadratic_known" if self.mode == "known" else BLIND_SCHEDULE[self.problem]
        rho = DEFAULT_RHO[self.problem]
        return ForcingSchedule(mode, self.rho_r if self.rho_r is not None else rho,
                               self.rho_p if self.rho_p is not None else rho)

    def resolved(self) -> dict:
        """Every setting after defaults are applied, for the report header."""
        d = asdict(self)
        s = self.schedule
        d.update(rho_r=s.rho_R, rho_p=s.rho_P, schedule=s.mode,
                 probes=self.probes if self.probes is not None else self.Q)
        d.pop("out")
        d.pop("threads")
        return d


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if raw.lower() in ("none", "") and "None" in kind:
        return None
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.split()[0]}")
    return raw


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            if key == "q":
                key = "Q"
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                out[key] = _convert(key, value.strip())
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return out


def run(config: RunConfig, stream=None):
    """Solve one benchmark; returns ``(exit_code, state, rows)``."""
    stream = sys.stdout if stream is None else stream
    problem = make_problem(config.problem, config.n, config.Q, config.seed)
    schedule = config.schedule
    cfg = RankOneSolverConfig(residual_tol=config.solver_tol, stagnation_tol=config.solver_tol,
                              spd_mode=problem.spd_precond)
    opts = DriverOptions(eps_target=config.eps_target, max_iter=config.max_iter,
                         alpha=config.alpha, probes=config.probes, probe_tol=config.probe_tol,
                         trunc_forcing=config.trunc_forcing,
                         solver_forcing=config.solver_forcing, threads=config.threads,
                         seed=config.seed)
    state = solve(problem, schedule, Truncator(config.trunc_eps), cfg, opts)
    rows = build_reports(state, problem, schedule.known)
    header = dict(config.resolved(), status=state.reason)
    if config.out:
        write_csv(config.out, header, rows)
    print(format_table(rows), file=stream)
    print(summary_line(state, rows), file=stream)
    if state.converged:
        return 0, state, rows
    if state.reason == "max_iter":
        return 2, state, rows
    print(f"error: {state.reason}", file=sys.stderr)
    return 1, state, rows


def summary_line(state, rows) -> str:
    if not rows:
        return f"no iteration completed ({state.reason})"
    last = rows[-1]
    orders = ""
    if len(state.epsilon_history) >= 3:
        orders = " orders=" + ",".join(f"{q:.3f}" for q in convergence_order(state.epsilon_history))
    return (f"final epsilon={last.epsilon:.3e} iterations={last.iteration} "
            f"cost_R={last.normalized_cost_R:.3e} cost_P={last.normalized_cost_P:.3e}"
            f"{orders} status={state.reason}")


IDENTITY_KEYS = ("problem", "n", "Q", "seed")


def compare_reports(a, b, tol: float = 3.0):
    """Side-by-side comparison of two parsed reports.

    Returns ``(lines, diverged_at)`` where ``diverged_at`` is the first
    iteration whose epsilon ratio leaves [1/tol, tol], or None.
    """
    (cfg_a, rows_a), (cfg_b, rows_b) = a, b
    for key in IDENTITY_KEYS:
        if cfg_a.get(key) != cfg_b.get(key):
            raise ConfigError(
                f"reports differ in {key}: {cfg_a.get(key)!r} vs {cfg_b.get(key)!r}"
            )
    lines = [f"{'iter':>4} {'eps A':>10} {'eps B':>10} {'ratio':>8} "
             f"{'cost_R A/B':>10} {'cost_P A/B':>10}"]
    diverged = None
    for ra, rb in zip(rows_a, rows_b):
        ratio = ra.epsilon / rb.epsilon if rb.epsilon > 0 else math.inf
        cr = ra.normalized_cost_R / rb.normalized_cost_R if rb.normalized_cost_R else math.inf
        cp = ra.normalized_cost_P / rb.normalized_cost_P if rb.normalized_cost_P else math.inf
        flag = ""
        if not (1.0 / tol <= ratio <= tol):
            flag = "  <- diverged"
            if diverged is None:
                diverged = ra.iteration
        lines.append(f"{ra.iteration:>4d} {ra.epsilon:>10.3e} {rb.epsilon:>10.3e} "
                     f"{ratio:>8.3f} {cr:>10.3f} {cp:>10.3f}{flag}")
    if len(rows_a) != len(rows_b):
        lines.append(f"iteration counts differ: {len(rows_a)} vs {len(rows_b)}")
    return lines, diverged


def _parser():
    ap = argparse.ArgumentParser(prog="paramnewton", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="solve a benchmark problem")
    r.add_argument("--config", help="file of key=value lines; flags take precedence")
    r.add_argument("--problem", choices=sorted(PROBLEMS))
    r.add_argument("--mode", choices=("known", "blind"))
    r.add_argument("--n", type=int)
    r.add_argument("--Q", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--rho-r", type=float, dest="rho_r")
    r.add_argument("--rho-p", type=float, dest="rho_p")
    r.add_argument("--trunc-eps", type=float, dest="trunc_eps")
    r.add_argument("--solver-tol", type=float, dest="solver_tol")
    r.add_argument("--eps-target", type=float, dest="eps_target")
    r.add_argument("--max-iter", type=int, dest="max_iter")
    r.add_argument("--alpha", type=float)
    r.add_argument("--probes", type=int)
    r.add_argument("--probe-tol", type=float, dest="probe_tol")
    r.add_argument("--trunc-forcing", type=float, dest="trunc_forcing",
                   help="adaptive truncation factor; 0 keeps --trunc-eps fixed")
    r.add_argument("--solver-forcing", type=float, dest="solver_forcing",
                   help="adaptive solver tolerance factor; 0 keeps --solver-tol fixed")
    r.add_argument("--threads", type=int)
    r.add_argument("--out", help="CSV report path")
    c = sub.add_parser("compare", help="compare two CSV reports")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--tol", type=float, default=3.0,
                   help="largest accepted epsilon ratio (default 3)")
    return ap


def config_from_args(args) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for name in _FIELD_TYPES:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return RunConfig(**values)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            code, _, _ = run(config_from_args(args))
            return code
        lines, diverged = compare_reports(read_csv(args.report_a), read_csv(args.report_b),
                                          args.tol)
        print("\n".join(lines))
        if diverged is not None:
            print(f"epsilon histories diverge at iteration {diverged}")
            return 2
        print("epsilon histories agree")
        return 0
    except (ConfigError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
