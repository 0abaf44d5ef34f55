#!/usr/bin/env python3
"""Solve an MPS file with HiGHS (highspy) and write a `name value` solution file.

usage: highs_solve.py MODEL.mps SOLUTION.sol [--time-limit SECONDS] [--gap REL_GAP]

The solution file starts with `=status=`, `=obj=` and `=gap=` records followed
by one `name value` line per column. Status is one of optimal, infeasible,
unbounded or limit.
"""
import argparse
import sys

import highspy


def status_name(h, status):
    m = highspy.HighsModelStatus
    if status == m.kOptimal:
        return "optimal"
    if status == m.kInfeasible:
        return "infeasible"
    if status == m.kUnbounded:
        return "unbounded"
    if status == m.kUnboundedOrInfeasible:
        # presolve could not tell; the simplex on the raw model can
        h.setOptionValue("presolve", "off")
        h.setOptionValue("solver", "simplex")
        h.run()
        again = h.getModelStatus()
        return "unbounded" if again == m.kUnbounded else "infeasible"
    return "limit"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("mps")
    ap.add_argument("sol")
    ap.add_argument("--time-limit", type=float, default=None)
    ap.add_argument("--gap", type=float, default=None)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()

    h = highspy.Highs()
    h.setOptionValue("output_flag", True)
    h.setOptionValue("log_to_console", True)
    if args.time_limit is not None:
        h.setOptionValue("time_limit", args.time_limit)
    if args.gap is not None:
        h.setOptionValue("mip_rel_gap", args.gap)
    if args.threads is not None:
        h.setOptionValue("threads", args.threads)
    if h.readModel(args.mps) == highspy.HighsStatus.kError:
        print(f"could not read {args.mps}", file=sys.stderr)
        return 1
    h.run()
    status = status_name(h, h.getModelStatus())
    info = h.getInfo()
    has_solution = info.primal_solution_status == 2
    lp = h.getLp()
    is_mip = any(t != highspy.HighsVarType.kContinuous for t in (lp.integrality_ or []))
    with open(args.sol, "w") as out:
        out.write(f"=status= {status}\n")
        if has_solution:
            out.write(f"=obj= {info.objective_function_value!r}\n")
            out.write(f"=gap= {(info.mip_gap if is_mip else 0.0)!r}\n")
            values = h.getSolution().col_value
            for name, v in zip(lp.col_names_, values):
                out.write(f"{name} {v!r}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
