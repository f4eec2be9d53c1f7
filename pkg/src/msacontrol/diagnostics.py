"""Convergence-rate analysis, a recursive sequence bound, and CSV export."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .msa import IterationTrace


@dataclass(frozen=True)
class RateReport:
    """Optimality-gap decay fitted over a window of accepted iterations.

    gaps holds b_n = J_n - j_star for every accepted iteration in the
    window; kept marks the entries above the noise floor that enter the
    fit.  passed is true when either the log-log slope is at most -0.8
    or sup n*b_n stays within twice its value at the first kept point.
    """

    n_values: np.ndarray
    gaps: np.ndarray
    gap_ses: np.ndarray
    kept: np.ndarray
    slope: float | None
    sup_n_times_bn: float | None
    sup_reference: float | None
    passed: bool
    status: str

    def n_times_bn(self) -> np.ndarray:
        return self.n_values * self.gaps


def rate_fit(
    trace: IterationTrace,
    j_star: float,
    n_min: int,
    n_max: int,
    noise_floor_factor: float = 5.0,
) -> RateReport:
    """Fit the decay of b_n = J_n - j_star on accepted iterations.

    Iterations with b_n <= noise_floor_factor * se are excluded from the
    fit; if everything is excluded the run converged before the window
    and the report passes vacuously.  A gap below -3 se marks the oracle
    and the run as mutually inconsistent.
    """
    if n_min < 1 or n_max < n_min:
        raise ValueError(f"bad rate window [{n_min}, {n_max}]")
    rows = [
        (n, j, se)
        for n, j, se, ok in zip(
            trace.iterations, trace.costs, trace.cost_ses, trace.accepted
        )
        if ok and n_min <= n <= n_max
    ]
    if not rows:
        raise ValueError(
            f"trace has no accepted iterations in [{n_min}, {n_max}]"
        )
    n_values = np.array([r[0] for r in rows], dtype=float)
    gaps = np.array([r[1] - j_star for r in rows])
    gap_ses = np.array([r[2] for r in rows])

    if np.any(gaps < -3.0 * gap_ses):
        return RateReport(
            n_values=n_values,
            gaps=gaps,
            gap_ses=gap_ses,
            kept=np.zeros(len(gaps), dtype=bool),
            slope=None,
            sup_n_times_bn=None,
            sup_reference=None,
            passed=False,
            status="oracle-inconsistent",
        )

    kept = gaps > noise_floor_factor * gap_ses
    if not kept.any():
        return RateReport(
            n_values=n_values,
            gaps=gaps,
            gap_ses=gap_ses,
            kept=kept,
            slope=None,
            sup_n_times_bn=None,
            sup_reference=None,
            passed=True,
            status="converged-before-rate-window",
        )

    nk = n_values[kept]
    bk = gaps[kept]
    n_times = nk * bk
    sup_val = float(n_times.max())
    reference = 2.0 * float(n_times[0])
    slope = None
    if nk.size >= 2:
        coeffs = np.polyfit(np.log(nk), np.log(bk), 1)
        slope = float(coeffs[0])
    slope_ok = slope is not None and slope <= -0.8
    sup_ok = sup_val <= reference
    passed = slope_ok or sup_ok
    return RateReport(
        n_values=n_values,
        gaps=gaps,
        gap_ses=gap_ses,
        kept=kept,
        slope=slope,
        sup_n_times_bn=sup_val,
        sup_reference=reference,
        passed=passed,
        status="rate-ok" if passed else "rate-fail",
    )


@dataclass(frozen=True)
class RecursiveBoundCheck:
    """Outcome of checking b_{k+1} <= b_k - q b_k^2 and k b_k <= max(b_1, 1/q).

    first_violation is the 1-based k of the first failing comparison, or
    None; kind names the failing part ("hypothesis" or "bound").
    """

    ok: bool
    hypothesis_ok: bool
    bound_ok: bool
    first_violation: int | None
    kind: str

    def __bool__(self) -> bool:
        return self.ok


def check_recursive_bound(seq, q: float) -> RecursiveBoundCheck:
    """Verify the quadratic-decrement hypothesis and the implied 1/k bound.

    The comparisons are exact (no tolerance): the bound is a discrete
    statement about the sequence, not an estimate.
    """
    b = np.asarray(seq, dtype=float)
    if b.ndim != 1 or b.size == 0:
        raise ValueError("seq must be a nonempty 1-d sequence")
    if not np.all(b >= 0.0):
        raise ValueError("seq entries must be nonnegative")
    q = float(q)
    if not q > 0.0:
        raise ValueError(f"q must be positive, got {q}")

    for i in range(b.size - 1):
        if not b[i + 1] <= b[i] - q * b[i] * b[i]:
            return RecursiveBoundCheck(
                ok=False,
                hypothesis_ok=False,
                bound_ok=False,
                first_violation=i + 1,
                kind="hypothesis",
            )
    cap = max(b[0], 1.0 / q)
    for k in range(1, b.size + 1):
        if not k * b[k - 1] <= cap:
            return RecursiveBoundCheck(
                ok=False,
                hypothesis_ok=True,
                bound_ok=False,
                first_violation=k,
                kind="bound",
            )
    return RecursiveBoundCheck(
        ok=True, hypothesis_ok=True, bound_ok=True, first_violation=None, kind=""
    )


TRACE_COLUMNS = ("n", "J", "J_se", "mu", "mu_se", "rho", "backtracks", "accepted", "wall_ms")
RATE_COLUMNS = ("n", "b_n", "n_times_bn")


def _num(x) -> str:
    # repr of a python float is the shortest round-tripping decimal
    return repr(float(x))


def export_csv(obj, path, wall_clock: bool = True) -> None:
    """Write a trace or a rate report as CSV.

    Numbers are rendered with shortest round-trip decimals, so reading
    the file back reproduces the in-memory doubles exactly.  Passing
    wall_clock=False zeroes the wall_ms column, which makes repeated
    runs byte-identical.
    """
    if isinstance(obj, IterationTrace):
        header = TRACE_COLUMNS
        rows = [
            [
                str(n),
                _num(j),
                _num(j_se),
                _num(mu),
                _num(mu_se),
                _num(rho),
                str(bt),
                str(int(acc)),
                _num(wall if wall_clock else 0.0),
            ]
            for n, j, j_se, mu, mu_se, rho, bt, acc, wall in zip(
                obj.iterations,
                obj.costs,
                obj.cost_ses,
                obj.mus,
                obj.mu_ses,
                obj.rhos,
                obj.backtracks,
                obj.accepted,
                obj.wall_ms,
            )
        ]
    elif isinstance(obj, RateReport):
        header = RATE_COLUMNS
        rows = [
            [str(int(n)), _num(b), _num(n * b)]
            for n, b in zip(obj.n_values, obj.gaps)
        ]
    else:
        raise TypeError(f"cannot export {type(obj).__name__} as CSV")
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"failed to write CSV to {path}: {exc}") from exc


def read_csv_columns(path) -> dict[str, list[str]]:
    """Read a CSV written by export_csv back as raw string columns."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            cols: dict[str, list[str]] = {name: [] for name in header}
            for row in reader:
                for name, cell in zip(header, row):
                    cols[name].append(cell)
            return cols
    except OSError as exc:
        raise OSError(f"failed to read CSV from {path}: {exc}") from exc
