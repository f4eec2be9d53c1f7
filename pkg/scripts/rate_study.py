#!/usr/bin/env python3
"""Fit the optimality-gap decay of the drift benchmark against its Riccati value.

Prints the per-iteration gaps b_n = J_n - J*, the fitted log-log slope,
and the sup n*b_n statistic.  A synthetic 1/log(n) sequence is replayed
through the same fit as a negative control: it must fail.
"""

import argparse
import math
import os

from msacontrol import (
    IterationTrace,
    MsaConfig,
    TimeGrid,
    export_csv,
    get_benchmark,
    rate_fit,
    riccati_lq,
    run_msa,
)


def describe(report, label):
    slope = "n/a" if report.slope is None else f"{report.slope:.3f}"
    sup = "n/a" if report.sup_n_times_bn is None else f"{report.sup_n_times_bn:.4f}"
    print(f"{label}: status={report.status} passed={report.passed} "
          f"slope={slope} sup(n*b_n)={sup}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--paths", type=int, default=10_000)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--seed", type=int, default=12345)
    ap.add_argument("--n-max", type=int, default=100)
    ap.add_argument("--out", default="out")
    args = ap.parse_args()

    bench = get_benchmark("lq_drift")
    cfg = MsaConfig(n_paths=args.paths, n_steps=args.steps, seed=args.seed)
    _, trace = run_msa(bench.problem, cfg)
    grid = TimeGrid(n_steps=cfg.n_steps, horizon=bench.problem.horizon)
    j_star = riccati_lq(bench.lq, grid).optimal_value
    print(f"problem: {bench.name}  J*={j_star:.6f}  solver status={trace.status}")

    last = max(n for n, ok in zip(trace.iterations, trace.accepted) if ok)
    report = rate_fit(trace, j_star, 1, min(last, args.n_max))
    print(f"{'n':>3} {'b_n':>12} {'n*b_n':>12} {'kept':>5}")
    for n, b, kept in zip(report.n_values, report.gaps, report.kept):
        print(f"{int(n):>3} {b:>12.6f} {n * b:>12.6f} {str(bool(kept)):>5}")
    describe(report, "solver")

    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "lq_drift_rate.csv")
    export_csv(report, path)
    print(f"wrote {path}")

    synthetic = IterationTrace(problem_name="one_over_log")
    synthetic.initial_cost, synthetic.initial_cost_se = 2.0, 0.0
    for n in range(1, 101):
        synthetic.add_row(n, 1.0 / math.log(n + 1.0), 0.0, 0.0, 0.0, 0.0, 0, True, 0.0)
    describe(rate_fit(synthetic, 0.0, 10, 100), "1/log(n) control")


if __name__ == "__main__":
    main()
