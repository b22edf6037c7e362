"""Exact MILP optimum versus the genetic search at selected K on a small population."""

import argparse

import numpy as np

from dbsa.design import DesignSpec, make_batch
from dbsa.experiments import milp_optimum
from dbsa.population import make_data, science_tables_appendix
from dbsa.worstcase import CompletionProblem, SolverConfig, pbar_curve


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--dgp", type=int, default=1, choices=(1, 2, 3))
    p.add_argument("--k", default="0.2,0.4,0.6")
    p.add_argument("--time-limit", type=float, default=600.0)
    args = p.parse_args()
    d = make_data(science_tables_appendix()[args.dgp - 1])
    prob = CompletionProblem.from_data(d, make_batch(DesignSpec(d.n, d.n1)))
    ks = np.array([float(v) for v in args.k.split(",")])
    ga = pbar_curve(prob, ks, SolverConfig())
    for k, g in zip(ks, ga.p_raw):
        m = milp_optimum(prob, float(k), args.time_limit)
        print(f"K={k:.3f}  GA={g:.4f}  MILP={m:.4f}  diff={g - m:+.4f}")


if __name__ == "__main__":
    main()
