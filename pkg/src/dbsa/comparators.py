"""Reference confidence intervals and exact design-based coverage.

Coverage is computed by enumerating every assignment of a fixed-margin
design, rebuilding the observed data, and checking whether each method's
interval contains the finite-population average treatment effect.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .bounds import Interval, k_grid, lp_bounds
from .design import AssignmentBatch, DesignSpec, enumerate_assignments, make_batch
from .population import ObservedData, Population, make_data
from .worstcase import (
    CompletionProblem,
    GeneticSolver,
    GridSolver,
    SolverConfig,
    k_alpha_flagged,
    pbar_curve,
)

METHODS = ("neyman", "fisher", "hoeffding", "dbsa")


@dataclass(frozen=True)
class CiResult:
    """One confidence interval and how it was computed."""

    method: str
    alpha: float
    interval: Interval
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")


def normal_quantile(p: float) -> float:
    return float(stats.norm.ppf(p))


def neyman_ci(data: ObservedData, alpha: float) -> CiResult:
    """Difference in means plus or minus a normal quantile times the Neyman standard error.

    An arm with a single unit contributes zero variance and sets the
    ``degenerate_arm`` flag.
    """
    _check_alpha(alpha)
    var = {}
    for arm in (0, 1):
        y = data.y[data.x == arm]
        var[arm] = float(np.var(y, ddof=1)) if y.size > 1 else 0.0
    v = var[1] / data.n1 + var[0] / data.n0
    z = normal_quantile(1 - alpha / 2)
    half = z * math.sqrt(v)
    est = data.ate_hat
    diag = {"v_neyman": v, "v1": var[1], "v0": var[0], "z": z,
            "degenerate_arm": bool(min(data.n1, data.n0) < 2)}
    return CiResult("neyman", alpha, Interval(est - half, est + half), diag)


def _default_batch(n: int, n1: int) -> AssignmentBatch:
    return make_batch(DesignSpec.auto(n, n1))


def fisher_pvalues(data: ObservedData, c_values, batch: AssignmentBatch | None = None) -> np.ndarray:
    """Randomization p-values of the constant-effect sharp nulls ``Y_i(1) - Y_i(0) = c``.

    The statistic is ``|dim - c|``; the p-value is the fraction of the batch
    whose statistic is strictly greater than the observed one.
    """
    batch = batch or _default_batch(data.n, data.n1)
    if batch.n_units != data.n or batch.n_treated != data.n1:
        raise ValueError("batch does not match the data's design")
    c = np.atleast_1d(np.asarray(c_values, dtype=float))
    # imputed Y(0) = y - c x, and the statistic under a is |dim(Y(0), a)|
    dy = batch.dims(data.y)
    dx = batch.dims(data.x.astype(float))
    stat = np.abs(dy[None, :] - c[:, None] * dx[None, :])
    observed = np.abs(data.ate_hat - c)
    slack = 1e-12 * max(1.0, data.spread)
    return (stat > observed[:, None] + slack).mean(axis=1)


def fisher_ci(data: ObservedData, alpha: float, batch: AssignmentBatch | None = None,
              c_grid=None) -> CiResult:
    """Set of constant effects whose sharp null is not rejected, reported as its hull.

    Parameters
    ----------
    data : ObservedData
    alpha : float
    batch : AssignmentBatch, optional
        Defaults to the full design when its support is small enough.
    c_grid : array_like, optional
        Candidate effects; defaults to steps of ``spread / 400`` over
        ``[-spread, spread]``.
    """
    _check_alpha(alpha)
    if c_grid is None:
        s = data.spread
        c_grid = np.linspace(-s, s, 801)
    c_grid = np.asarray(c_grid, dtype=float)
    p = fisher_pvalues(data, c_grid, batch)
    accepted = c_grid[p > alpha]
    diag = {"c_grid_size": int(c_grid.size), "n_accepted": int(accepted.size)}
    if accepted.size == 0:
        diag["empty"] = True
        return CiResult("fisher", alpha, Interval.empty_set(), diag)
    idx = np.flatnonzero(p > alpha)
    diag["contiguous"] = bool(np.all(np.diff(idx) == 1))
    return CiResult("fisher", alpha, Interval(float(accepted.min()), float(accepted.max())), diag)


def hoeffding_ci(data: ObservedData, alpha: float) -> CiResult:
    """Horvitz-Thompson estimate with a Hoeffding half-width.

    Requires equal arm sizes so each unit is treated with probability 1/2.
    """
    _check_alpha(alpha)
    if data.n1 != data.n0:
        raise ValueError(f"Hoeffding interval needs equal arms, got N1 = {data.n1}, N0 = {data.n0}")
    n = data.n
    est = float(np.sum(2 * (2 * data.x - 1) * data.y) / n)
    half = hoeffding_half_width(n, alpha, data.spread)
    return CiResult("hoeffding", alpha, Interval(est - half, est + half),
                    {"estimate": est, "half_width": half})


def hoeffding_half_width(n: int, alpha: float, spread: float = 1.0) -> float:
    return 4 * spread * math.sqrt(math.log(4 / alpha) / (2 * n))


def hoeffding_n_min(alpha: float) -> float:
    """Sample size below which the Hoeffding interval is wider than ``[-spread, spread]``."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    return 8 * math.log(4 / alpha)


@dataclass(frozen=True)
class DbsaSettings:
    """Inner pipeline for the design-based interval inside coverage studies.

    Parameters
    ----------
    solver : {"grid", "ga"}
        Brute-force grid or genetic search for the worst-case probability.
    points_per_cell : int
        Grid resolution for the brute-force solver.
    n_k : int
        Number of uniform ``K`` grid points on ``[0, spread]``.
    ga : SolverConfig
        Genetic search settings with a fixed seed.
    """

    solver: str = "grid"
    points_per_cell: int = 5
    n_k: int = 101
    ga: SolverConfig = SolverConfig(population_size=100, restarts=2, patience=20)

    def __post_init__(self):
        if self.solver not in ("grid", "ga"):
            raise ValueError(f"unknown inner solver {self.solver!r}")


def dbsa_intervals(data: ObservedData, alphas: Sequence[float], batch: AssignmentBatch,
                   settings: DbsaSettings = DbsaSettings()) -> list[CiResult]:
    """Identified sets at the calibrated ``K(alpha)`` for each ``alpha``."""
    problem = CompletionProblem.from_data(data, batch)
    grid = k_grid(problem.spread, settings.n_k)
    solver = (GridSolver(settings.points_per_cell) if settings.solver == "grid"
              else GeneticSolver(settings.ga))
    curve = pbar_curve(problem, grid, solver=solver, stop_below=1 - max(alphas))
    out = []
    for a in alphas:
        k, sat = k_alpha_flagged(curve, a)
        out.append(CiResult("dbsa", a, lp_bounds(data, k), {"k_alpha": k, "saturated": sat}))
    return out


@dataclass(frozen=True)
class CoverageReport:
    """Exact coverage of each method and level over a full design."""

    population_id: str
    truth: float
    n_assignments: int
    coverage: dict
    errors: dict = field(default_factory=dict)
    mean_width: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float, float]]:
        return [(m, a, c) for (m, a), c in sorted(self.coverage.items())]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "alpha", "coverage"])
            for m, a, c in self.rows():
                w.writerow([m, repr(float(a)), repr(float(c))])

    def to_dict(self) -> dict:
        return {
            "population_id": self.population_id,
            "truth": self.truth,
            "n_assignments": self.n_assignments,
            "coverage": [{"method": m, "alpha": a, "coverage": c} for m, a, c in self.rows()],
            "errors": [{"method": m, "alpha": a, "count": n}
                       for (m, a), n in sorted(self.errors.items())],
            "mean_width": [{"method": m, "alpha": a, "width": v}
                           for (m, a), v in sorted(self.mean_width.items())],
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _method_intervals(data: ObservedData, method: str, alphas, batch, settings) -> list:
    if method == "neyman":
        return [neyman_ci(data, a) for a in alphas]
    if method == "fisher":
        return [fisher_ci(data, a, batch) for a in alphas]
    if method == "hoeffding":
        return [hoeffding_ci(data, a) for a in alphas]
    return dbsa_intervals(data, alphas, batch, settings)


def exact_coverage(pop: Population, methods: Sequence[str], alphas: Sequence[float],
                   design: DesignSpec | None = None, settings: DbsaSettings = DbsaSettings(),
                   population_id: str = "population", n_jobs: int = 1) -> CoverageReport:
    """Exact coverage of the population ATE over every assignment of the design.

    Results for a method depend on the observed data only through
    :meth:`ObservedData.canonical_key`, so each distinct realization is
    analyzed once.  A method that raises on some assignment counts as not
    covering there.
    """
    methods = list(methods)
    if not methods:
        raise ValueError("at least one method is required")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    alphas = [float(a) for a in alphas]
    for a in alphas:
        _check_alpha(a)
    n1 = int(pop.x.sum())
    design = design or DesignSpec(pop.n_units, n1)
    if design.n_units != pop.n_units:
        raise ValueError("design and population sizes differ")
    outer = enumerate_assignments(design)
    inner = outer
    truth = pop.ate
    datasets = [make_data(pop.with_assignment(a)) for a in outer.assignments]
    keys = [d.canonical_key() for d in datasets]
    first = {}
    for i, k in enumerate(keys):
        first.setdefault(k, i)
    unique_idx = sorted(first.values())

    def analyze(i):
        res = {}
        for m in methods:
            try:
                res[m] = [ci.interval for ci in _method_intervals(datasets[i], m, alphas, inner, settings)]
            except (ValueError, ArithmeticError, RuntimeError) as exc:
                res[m] = exc
        return res

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = dict(zip(unique_idx, pool.map(analyze, unique_idx)))
    else:
        results = {i: analyze(i) for i in unique_idx}

    hits, errs, widths = {}, {}, {}
    for m in methods:
        for j, a in enumerate(alphas):
            hits[m, a], errs[m, a], widths[m, a] = 0, 0, 0.0
    tol = 1e-9 * max(1.0, float(np.max(pop.hi) - np.min(pop.lo)))
    for key in keys:
        res = results[first[key]]
        for m in methods:
            for j, a in enumerate(alphas):
                if isinstance(res[m], Exception):
                    errs[m, a] += 1
                    continue
                iv = res[m][j]
                hits[m, a] += int(iv.contains(truth, tol))
                widths[m, a] += 0.0 if iv.empty else iv.width
    b = outer.size
    coverage = {key: v / b for key, v in hits.items()}
    mean_width = {key: v / max(b - errs[key], 1) for key, v in widths.items()}
    errors = {key: v for key, v in errs.items() if v}
    return CoverageReport(population_id, truth, b, coverage, errors, mean_width)
