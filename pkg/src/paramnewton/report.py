"""Per-iteration reports and their CSV serialization.

A report file starts with ``# key=value`` lines echoing the resolved run
configuration, followed by a header row and one row per iteration.  Floats
are written with ``repr`` so that reading a file back is exact.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

import numpy as np

from .newton import NewtonState, normalized_costs


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    epsilon: float
    residual_calls: int
    precond_calls: int
    normalized_cost_R: float
    normalized_cost_P: float
    iterate_rank: int
    residual_rank: int
    precond_rank: int
    increment_rank: int
    solver_ratio: float
    truncation_error: float
    residual_vector_calls: int
    residual_entry_calls: int
    precond_matrix_calls: int
    precond_entry_calls: int
    wall_time: float


COLUMNS = tuple(f.name for f in fields(IterationReport))
_TYPES = {f.name: (int if f.type in ("int", int) else float) for f in fields(IterationReport)}
TIMING_COLUMNS = ("wall_time",)


def build_reports(state: NewtonState, problem, known: bool) -> list:
    N, Q, nnz = problem.N, problem.Q, problem.pattern.nnz
    rows = []
    for rec in state.records:
        led = rec.ledger
        cost_R, cost_P = normalized_costs(led, known, N, nnz, Q, rec.iteration)
        if known:
            r_calls, p_calls = led["residual_vector_calls"], led["precond_matrix_calls"]
        else:
            r_calls = led["residual_entry_calls"] + N * led["residual_vector_calls"]
            p_calls = led["precond_entry_calls"] + nnz * led["precond_matrix_calls"]
        rows.append(IterationReport(
            iteration=rec.iteration, epsilon=float(rec.epsilon),
            residual_calls=int(r_calls), precond_calls=int(p_calls),
            normalized_cost_R=float(cost_R), normalized_cost_P=float(cost_P),
            iterate_rank=rec.iterate_rank, residual_rank=rec.residual_rank,
            precond_rank=rec.precond_rank, increment_rank=rec.increment_rank,
            solver_ratio=float(rec.solver_ratio), truncation_error=float(rec.truncation_error),
            wall_time=float(rec.wall_time), **{k: int(v) for k, v in led.items()},
        ))
    return rows


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def format_csv(config: dict, rows: list) -> str:
    buf = io.StringIO()
    for key, value in config.items():
        buf.write(f"# {key}={value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        d = asdict(row)
        writer.writerow([_fmt(d[c]) for c in COLUMNS])
    return buf.getvalue()


def write_csv(path, config: dict, rows: list) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(config, rows))


def parse_csv(text: str):
    """Inverse of :func:`format_csv`; returns ``(config, rows)``.

    Config values are returned as strings.
    """
    config, body = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: malformed config line {line!r}")
            config[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    reader = csv.reader(body)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("report has no header row")
    missing = set(COLUMNS) - set(header)
    if missing:
        raise ValueError(f"report is missing columns {sorted(missing)}")
    rows = []
    for rec in reader:
        d = dict(zip(header, rec))
        rows.append(IterationReport(**{c: _TYPES[c](d[c]) for c in COLUMNS}))
    return config, rows


def read_csv(path):
    with open(path, encoding="utf-8") as fh:
        return parse_csv(fh.read())


def format_table(rows: list) -> str:
    head = (f"{'iter':>4} {'epsilon':>10} {'R calls':>9} {'R cost':>9} "
            f"{'P calls':>9} {'P cost':>9} {'rank u':>6} {'rank R':>6} {'rank P':>6} {'time':>7}")
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.iteration:>4d} {r.epsilon:>10.3e} {r.residual_calls:>9d} "
            f"{r.normalized_cost_R:>9.2e} {r.precond_calls:>9d} {r.normalized_cost_P:>9.2e} "
            f"{r.iterate_rank:>6d} {r.residual_rank:>6d} {r.precond_rank:>6d} {r.wall_time:>6.2f}s"
        )
    return "\n".join(lines)
