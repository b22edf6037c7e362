"""Simulation studies shared by the scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

from .bounds import bounds_curve, breakdown_point, k_grid
from .design import DesignSpec, make_batch
from .population import DgpSpec, ObservedData, generate_dgp, make_data
from .worstcase import (
    CompletionProblem,
    SolverConfig,
    WorstCaseCurve,
    k_alpha,
    milp_model,
    pbar_curve,
    strength_of_evidence,
)

LIGHT_SOLVER = SolverConfig(population_size=100, restarts=2, patience=20)


@dataclass(frozen=True)
class IllustrationConfig:
    """Nested-population study of how calibrated sets shrink with ``N``."""

    sizes: tuple = (10, 20, 40, 100)
    alpha: float = 0.1
    batch_size: int = 1600
    batch_seed: int = 0
    n_k: int = 101
    dgp: DgpSpec = field(default_factory=DgpSpec)
    solver: SolverConfig = LIGHT_SOLVER


def illustration(cfg: IllustrationConfig = IllustrationConfig()) -> list[dict]:
    """One row per ``N``: calibrated ``K``, width of its identified set, and ``p_tilde(K_bp)``."""
    rows = []
    for n in cfg.sizes:
        start = time.perf_counter()
        d = make_data(generate_dgp(cfg.dgp, n))
        batch = make_batch(DesignSpec.auto(n, d.n1, cfg.batch_size, cfg.batch_seed))
        prob = CompletionProblem.from_data(d, batch)
        grid = k_grid(prob.spread, cfg.n_k, (breakdown_point(d),))
        bc = bounds_curve(d, grid)
        curve = pbar_curve(prob, grid, cfg.solver)
        k = k_alpha(curve, cfg.alpha)
        iv = bc.at(k)
        rows.append({
            "n": n,
            "batch_size": batch.size,
            "ate_hat": d.ate_hat,
            "k_bp": bc.breakdown,
            "k_alpha": k,
            "lb": iv.lo,
            "ub": iv.hi,
            "width": iv.width,
            "pbar_at_kbp": strength_of_evidence(bc, curve),
            "seconds": time.perf_counter() - start,
        })
    return rows


def batch_sensitivity(data: ObservedData, batch_sizes: Sequence[int], grid=None,
                      cfg: SolverConfig = LIGHT_SOLVER, seed: int = 0) -> dict[int, WorstCaseCurve]:
    """Worst-case curves for Monte Carlo batches of several sizes on a common grid."""
    out = {}
    for b in batch_sizes:
        batch = make_batch(DesignSpec(data.n, data.n1, source="monte_carlo", batch_size=b, seed=seed))
        prob = CompletionProblem.from_data(data, batch)
        g = k_grid(prob.spread, 101) if grid is None else grid
        out[b] = pbar_curve(prob, g, cfg)
    return out


def milp_optimum(problem: CompletionProblem, k: float, time_limit: float | None = None) -> float:
    """Solve the big-M program with HiGHS; returns the optimal balance probability."""
    from scipy.optimize import Bounds, LinearConstraint, milp

    mod = milp_model(problem, k)
    options = {} if time_limit is None else {"time_limit": time_limit}
    res = milp(mod.c, constraints=LinearConstraint(mod.a, mod.row_lo, mod.row_hi),
               integrality=mod.integrality, bounds=Bounds(mod.var_lo, mod.var_hi), options=options)
    if res.x is None:
        raise RuntimeError(f"MILP solve failed: {res.message}")
    return float(res.fun)
