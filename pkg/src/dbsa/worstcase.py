"""Worst-case design probability of approximate balance.

For a completion ``c`` of the unknown potential outcomes let ``m_j(c)`` be the
larger of the two absolute differences in means under assignment ``j``.
The balance probability ``p(K; c)`` is the empirical cdf of ``m(c)`` at ``K``
and the target is ``pbar(K) = inf_c p(K; c)``.

Record keeping uses one identity.  If ``s(c)`` is ``m(c)`` sorted ascending
and ``S`` is the elementwise maximum of ``s(c)`` over every completion
evaluated so far, then ``min_c p(K; c) = #{i : S_i <= K} / B`` for every
``K`` at once.  The genetic search therefore minimizes at one ``K`` at a time
while every evaluated completion tightens the whole curve.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .bounds import BoundsCurve, Interval, RestrictionSet, breakdown_point, free_cell_boxes, k_grid
from .covariates import CovariateModel, ResidualConstraint
from .design import AssignmentBatch, tie_tolerance
from .population import ObservedData


class FalsifiedError(RuntimeError):
    """The covariate restriction admits no completion of the data."""


@dataclass(frozen=True)
class SolverConfig:
    """Genetic search settings.

    Parameters
    ----------
    population_size, generations : int
        Individuals per generation and the generation cap at each ``K``.
    crossover_rate : float
        Probability that a child is a uniform crossover of two parents.
    mutation_sigma : float
        Gaussian mutation scale as a fraction of each cell's box width.
    sigma_decay : float
        Multiplicative decay of the mutation scale per generation.
    elitism_count, tournament_size : int
    restarts : int
        Independent sweeps over the grid, each with its own random substream.
    seed : int
    patience : int
        Generations without improvement at a ``K`` before moving on.
    tolerance : float
        Target fraction; the search at a ``K`` stops once the best value is
        at or below it.
    time_budget : float or None
        Wall-clock seconds allowed per ``K`` and restart.
    vertex_fraction : float
        Share of each initial population drawn from box vertices.
    n_jobs : int
        Worker threads across restarts; results do not depend on it.
    """

    population_size: int = 200
    generations: int = 300
    crossover_rate: float = 0.9
    mutation_sigma: float = 0.1
    sigma_decay: float = 0.99
    elitism_count: int = 4
    tournament_size: int = 4
    restarts: int = 5
    seed: int = 0
    patience: int = 60
    tolerance: float = 0.0
    time_budget: float | None = None
    vertex_fraction: float = 0.5
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("population_size", "generations", "tournament_size", "restarts",
                     "patience", "n_jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.mutation_sigma <= 1:
            raise ValueError("mutation_sigma must lie in (0, 1]")
        if not 0 <= self.crossover_rate <= 1:
            raise ValueError("crossover_rate must lie in [0, 1]")
        if not 0 <= self.elitism_count < self.population_size:
            raise ValueError("elitism_count must be below population_size")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class Channel:
    """One balance condition: a vector with fixed entries and boxed free cells."""

    name: str
    values: np.ndarray
    free: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    constraint: ResidualConstraint | None = None

    @property
    def n_free(self) -> int:
        return int(self.free.size)

    @property
    def range(self) -> float:
        """Largest gap between any two entries of a completed vector."""
        fixed_mask = np.ones(self.values.size, dtype=bool)
        fixed_mask[self.free] = False
        fixed = self.values[fixed_mask]
        top = max(fixed.max(initial=-math.inf), self.hi.max(initial=-math.inf))
        bottom = min(fixed.min(initial=math.inf), self.lo.min(initial=math.inf))
        return float(top - bottom)

    def complete(self, cells: np.ndarray) -> np.ndarray:
        v = self.values.copy()
        v[self.free] = cells
        return v


@dataclass(frozen=True, eq=False)
class CompletionProblem:
    """Balance conditions, a fixed assignment batch, and the free cells.

    For the treatment-effect problem the channels are ``Y(1)`` (free for
    controls) and ``Y(0)`` (free for treated units); genes are ordered with
    the ``Y(1)`` cells first.
    """

    batch: AssignmentBatch
    channels: tuple[Channel, ...]
    data: ObservedData | None = None
    restrictions: RestrictionSet = RestrictionSet()
    covariate_lambda: float | None = None

    def __post_init__(self):
        if not self.channels:
            raise ValueError("a completion problem needs at least one channel")
        for ch in self.channels:
            if ch.values.size != self.batch.n_units:
                raise ValueError(f"channel {ch.name} has the wrong length")
            if np.any(ch.lo > ch.hi):
                raise FalsifiedError(f"channel {ch.name}: empty box for some free cell")

    @classmethod
    def from_data(cls, data: ObservedData, batch: AssignmentBatch,
                  restrictions: RestrictionSet = RestrictionSet(),
                  covariates: CovariateModel | None = None) -> "CompletionProblem":
        """Treatment-effect problem: balance of both potential-outcome vectors."""
        if batch.n_units != data.n:
            raise ValueError("batch and data have different numbers of units")
        if not restrictions.is_box:
            raise ValueError(f"{restrictions.kind} couples free cells across units; "
                             "worst-case probabilities support box restrictions only")
        boxes = free_cell_boxes(data, restrictions)
        channels = []
        for arm, name in ((1, "y1"), (0, "y0")):
            idx, lo, hi = boxes[arm]
            values = np.where(data.x == arm, data.y, 0.0)
            con = None
            if covariates is not None:
                con = ResidualConstraint.build(covariates, values, idx, lo, hi)
            channels.append(Channel(name, values, idx, lo, hi, con))
        lam = None if covariates is None else covariates.lam
        return cls(batch, tuple(channels), data, restrictions, lam)

    @cached_property
    def spread(self) -> float:
        """``K`` at or above which every completion is balanced under every assignment."""
        return max(ch.range for ch in self.channels)

    @cached_property
    def slices(self) -> list[slice]:
        out, start = [], 0
        for ch in self.channels:
            out.append(slice(start, start + ch.n_free))
            start += ch.n_free
        return out

    @property
    def n_genes(self) -> int:
        return sum(ch.n_free for ch in self.channels)

    @cached_property
    def gene_lo(self) -> np.ndarray:
        return np.concatenate([ch.lo for ch in self.channels])

    @cached_property
    def gene_hi(self) -> np.ndarray:
        return np.concatenate([ch.hi for ch in self.channels])

    @cached_property
    def _linear_maps(self):
        c = self.batch.contrast
        return [(c @ ch.values, np.ascontiguousarray(c[:, ch.free].T)) for ch in self.channels]

    @property
    def has_constraints(self) -> bool:
        return any(ch.constraint is not None for ch in self.channels)

    @cached_property
    def falsified(self) -> bool:
        return any(ch.constraint is not None and ch.n_free and not ch.constraint.feasible
                   for ch in self.channels)

    def imbalance(self, genes: np.ndarray) -> np.ndarray:
        """Per-assignment maximum absolute imbalance, shape ``(P, B)``."""
        genes = np.atleast_2d(genes)
        out = None
        for (base, cf), sl in zip(self._linear_maps, self.slices):
            d = np.abs(base + genes[:, sl] @ cf)
            out = d if out is None else np.maximum(out, d)
        return out

    def repair(self, genes: np.ndarray) -> np.ndarray:
        """Enforce the covariate restriction row by row."""
        if not self.has_constraints:
            return genes
        genes = genes.copy()
        for ch, sl in zip(self.channels, self.slices):
            if ch.constraint is not None and ch.n_free:
                genes[:, sl] = ch.constraint.repair(genes[:, sl])
        return genes

    def completion(self, genes: np.ndarray) -> list[np.ndarray]:
        """Completed channel vectors for one gene vector."""
        return [ch.complete(genes[sl]) for ch, sl in zip(self.channels, self.slices)]

    def probability(self, genes: np.ndarray, k: float) -> float:
        m = self.imbalance(genes)[0]
        return float(np.count_nonzero(m <= k + self.tie_tol)) / self.batch.size

    @property
    def tie_tol(self) -> float:
        return tie_tolerance(self.spread)


@dataclass(frozen=True, eq=False)
class WorstCaseCurve:
    """Worst-case balance probability along a ``K`` grid.

    ``p_raw`` holds the solver values; ``p_tilde`` is their monotone
    adjustment ``min_{K' >= K} p_raw(K')``.
    """

    k_grid: np.ndarray
    p_raw: np.ndarray
    p_tilde: np.ndarray
    diagnostics: tuple = ()
    status: str = "ok"
    record: np.ndarray | None = field(default=None, repr=False)

    def at(self, k: float) -> float:
        """``p_tilde`` at the largest grid point not exceeding ``k`` (right-continuous step)."""
        if math.isinf(k) and k > 0:
            return 1.0
        pos = int(np.searchsorted(self.k_grid, k * (1 + 1e-12) + 1e-300, side="right")) - 1
        if pos < 0:
            return 0.0
        return float(self.p_tilde[pos])

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "p_raw", "p_tilde"])
            for k, a, b in zip(self.k_grid, self.p_raw, self.p_tilde):
                w.writerow([repr(float(k)), repr(float(a)), repr(float(b))])

    def diagnostics_json(self) -> str:
        return json.dumps({"status": self.status, "points": list(self.diagnostics)}, indent=2)


def monotone_adjust(p_raw: np.ndarray) -> np.ndarray:
    """``p_tilde(K_i) = min_{j >= i} p_raw(K_j)`` over the evaluated (non-NaN) points."""
    return np.fmin.accumulate(np.asarray(p_raw, dtype=float)[::-1])[::-1]


def _hash(genes: np.ndarray | None) -> str | None:
    if genes is None:
        return None
    return hashlib.sha1(np.ascontiguousarray(genes, dtype=float).tobytes()).hexdigest()[:12]


class _Record:
    """Elementwise maximum of sorted imbalance vectors, with the genes that set it."""

    def __init__(self, size: int, n_genes: int):
        self.values = np.full(size, -math.inf)
        self.genes = np.zeros((size, n_genes))

    def update(self, m: np.ndarray, genes: np.ndarray) -> None:
        s = np.sort(m, axis=1)
        who = np.argmax(s, axis=0)
        best = s[who, np.arange(s.shape[1])]
        better = best > self.values
        if better.any():
            self.values[better] = best[better]
            self.genes[better] = genes[who[better]]

    def count(self, k: float, tol: float) -> int:
        return int(np.count_nonzero(self.values <= k + tol))

    def best_at(self, k: float, tol: float) -> np.ndarray | None:
        n = self.count(k, tol)
        return None if n >= self.values.size else self.genes[n]


def _initial_population(problem: CompletionProblem, cfg: SolverConfig, rng, seeds) -> np.ndarray:
    p, g = cfg.population_size, problem.n_genes
    lo, hi = problem.gene_lo, problem.gene_hi
    n_vertex = int(round(cfg.vertex_fraction * p))
    vert = np.where(rng.random((n_vertex, g)) < 0.5, lo, hi)
    unif = lo + rng.random((p - n_vertex, g)) * (hi - lo)
    pop = np.vstack([vert, unif])
    seeds = [s for s in seeds if s is not None]
    for i, s in enumerate(seeds[: p // 4]):
        pop[i] = s
    return problem.repair(pop)


def _fitness(m: np.ndarray, k: float, tol: float) -> np.ndarray:
    """Balanced count plus a tie-break in ``[0, 0.5)`` favoring imbalance close to ``k``."""
    ok = m <= k + tol
    count = ok.sum(axis=1).astype(float)
    if k > 0:
        closeness = np.where(ok, 1.0 - m / (k + tol), 0.0).sum(axis=1) / m.shape[1]
        count += 0.5 * np.clip(closeness, 0.0, 0.999)
    return count


def _ga_at_k(problem: CompletionProblem, k: float, cfg: SolverConfig, rng,
             record: _Record, seeds) -> tuple[np.ndarray, int, str]:
    """Minimize the balance probability at ``k``; returns best genes, generations, status."""
    tol = problem.tie_tol
    lo, hi = problem.gene_lo, problem.gene_hi
    width = hi - lo
    p, g = cfg.population_size, problem.n_genes
    pm = 1.0 / max(g, 1) if g > 2 else 0.5
    pop = _initial_population(problem, cfg, rng, seeds)
    m = problem.imbalance(pop)
    record.update(m, pop)
    fit = _fitness(m, k, tol)
    best = float(fit.min())
    stall, gen, status = 0, 0, "ok"
    start = time.perf_counter()
    sigma = cfg.mutation_sigma
    for gen in range(1, cfg.generations + 1):
        if best < 1.0 or best / problem.batch.size <= cfg.tolerance:
            status = "zero" if best < 1.0 else "tolerance"
            break
        order = np.argsort(fit, kind="stable")
        elite = pop[order[: cfg.elitism_count]]
        n_child = p - cfg.elitism_count
        cand = rng.integers(0, p, size=(2 * n_child, cfg.tournament_size))
        winners = cand[np.arange(2 * n_child), np.argmin(fit[cand], axis=1)]
        pa, pb = pop[winners[:n_child]], pop[winners[n_child:]]
        cross = rng.random(n_child) < cfg.crossover_rate
        mask = rng.random((n_child, g)) < 0.5
        child = np.where(cross[:, None] & mask, pb, pa)
        mut = rng.random((n_child, g)) < pm
        noise = rng.standard_normal((n_child, g)) * (sigma * width)
        child = np.clip(np.where(mut, child + noise, child), lo, hi)
        child = problem.repair(child)
        pop = np.vstack([elite, child])
        m = problem.imbalance(pop)
        record.update(m, pop)
        fit = _fitness(m, k, tol)
        new_best = float(fit.min())
        if new_best < best - 1e-12:
            best, stall = new_best, 0
        else:
            stall += 1
        sigma *= cfg.sigma_decay
        if stall >= cfg.patience:
            status = "stalled"
            break
        if cfg.time_budget is not None and time.perf_counter() - start > cfg.time_budget:
            status = "budget"
            break
    return pop[int(np.argmin(fit))], gen, status


def _sweep(problem: CompletionProblem, grid: np.ndarray, cfg: SolverConfig, seed_seq,
           stop_below: float = 0.0):
    """One restart: descending sweep over the grid with warm starts."""
    rng = np.random.Generator(np.random.Philox(seed_seq))
    tol = problem.tie_tol
    record = _Record(problem.batch.size, problem.n_genes)
    warm = None
    info = {}
    for i in range(grid.size - 1, -1, -1):
        k = float(grid[i])
        if k >= problem.spread - tol:
            info[i] = (0, "exact")
            continue
        if record.count(k, tol) == 0:
            info[i] = (0, "record")
            continue
        warm_best, gens, status = _ga_at_k(
            problem, k, cfg, rng, record, [warm, record.best_at(k, tol)]
        )
        warm = warm_best
        info[i] = (gens, status)
        if record.count(k, tol) < stop_below * problem.batch.size:
            break
    for j in range(i):
        info.setdefault(j, (0, "skipped"))
    return record, info


class GeneticSolver:
    """Genetic search with restarts and record keeping across ``K``."""

    def __init__(self, cfg: SolverConfig | None = None):
        self.cfg = cfg or SolverConfig()

    def solve(self, problem: CompletionProblem, grid: np.ndarray,
              stop_below: float = 0.0) -> WorstCaseCurve:
        cfg = self.cfg
        if problem.falsified:
            return _falsified_curve(grid)
        children = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
        if cfg.n_jobs > 1 and cfg.restarts > 1:
            with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
                results = list(pool.map(lambda c: _sweep(problem, grid, cfg, c, stop_below),
                                        children))
        else:
            results = [_sweep(problem, grid, cfg, c, stop_below) for c in children]
        values = np.vstack([r.values for r, _ in results])
        combined = values.max(axis=0)
        owner = values.argmax(axis=0)
        tol = problem.tie_tol
        bsize = problem.batch.size
        p_raw = np.empty(grid.size)
        diags = []
        for i, k in enumerate(grid):
            if k >= problem.spread - tol:
                p_raw[i] = 1.0
                diags.append({"k": float(k), "restarts": cfg.restarts, "generations": 0,
                              "best_completion": None, "status": "exact"})
                continue
            n = int(np.count_nonzero(combined <= k + tol))
            p_raw[i] = n / bsize
            genes = None if n >= bsize else results[owner[n]][0].genes[n]
            statuses = [info[i][1] for _, info in results]
            status = "budget" if "budget" in statuses else "ok"
            diags.append({
                "k": float(k),
                "restarts": cfg.restarts,
                "generations": int(sum(info[i][0] for _, info in results)),
                "best_completion": _hash(genes),
                "status": status,
            })
        status = "budget" if any(d["status"] == "budget" for d in diags) else "ok"
        return WorstCaseCurve(grid, p_raw, monotone_adjust(p_raw), tuple(diags), status, combined)


def _falsified_curve(grid: np.ndarray) -> WorstCaseCurve:
    nan = np.full(grid.size, math.nan)
    diags = tuple({"k": float(k), "status": "falsified"} for k in grid)
    return WorstCaseCurve(grid, nan, nan.copy(), diags, "falsified")


_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


def _unique_patterns(ok: np.ndarray) -> np.ndarray:
    packed = np.ascontiguousarray(np.packbits(ok, axis=1))
    rows = packed.view(np.dtype((np.void, packed.shape[1]))).ravel()
    return np.unique(rows).view(np.uint8).reshape(-1, packed.shape[1])


def _popcounts(packed: np.ndarray) -> np.ndarray:
    return _POPCOUNT[packed].sum(axis=-1)


def _minimal_patterns(packed: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Drop patterns that contain another pattern; they can never attain the minimum.

    Patterns are visited by increasing popcount, so each one only needs to be
    compared with the minimal patterns already kept.
    """
    if packed.shape[0] <= 1:
        return packed
    n_bytes = packed.shape[1]
    packed = packed[np.argsort(_popcounts(packed), kind="stable")]
    pad = -n_bytes % 8
    words = np.ascontiguousarray(np.pad(packed, ((0, 0), (0, pad)))).view(np.uint64)
    kept = words[:1]
    for start in range(1, words.shape[0], chunk):
        cand = words[start:start + chunk]
        # kept q is a subset of p  <=>  q & ~p == 0
        covered = ((kept[None, :, :] & ~cand[:, None, :]) == 0).all(axis=2).any(axis=1)
        cand = cand[~covered]
        # rows are sorted by popcount, so a row can only contain an earlier one
        if cand.shape[0] > 1:
            inner = ((cand[None, :, :] & ~cand[:, None, :]) == 0).all(axis=2)
            inner &= np.tri(cand.shape[0], k=-1, dtype=bool)
            cand = cand[~inner.any(axis=1)]
        kept = np.vstack([kept, cand])
    return np.ascontiguousarray(kept).view(np.uint8)[:, :n_bytes]


def _pair_min(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> tuple[int, np.ndarray]:
    """``min |a_i & b_j|`` over all pairs, with the attaining intersection."""
    best, arg = None, None
    for start in range(0, a.shape[0], chunk):
        block = a[start:start + chunk]
        counts = np.zeros((block.shape[0], b.shape[0]), dtype=np.uint16)
        for byte in range(a.shape[1]):
            counts += _POPCOUNT[block[:, None, byte] & b[None, :, byte]]
        i, j = np.unravel_index(int(np.argmin(counts)), counts.shape)
        if best is None or counts[i, j] < best:
            best, arg = int(counts[i, j]), block[i] & b[j]
    return best, arg


def _joint_min(pats: list[np.ndarray]) -> int:
    """``min |P_1 & P_2 & ...|`` over one pattern per channel."""
    if len(pats) == 1:
        return int(_popcounts(pats[0]).min())
    if len(pats) == 2:
        return _pair_min(pats[0], pats[1])[0]
    acc = pats[0]
    for nxt in pats[1:]:
        acc = _minimal_patterns(np.unique((acc[:, None, :] & nxt[None, :, :]).reshape(-1, acc.shape[1]), axis=0))
    return int(_popcounts(acc).min())


class GridSolver:
    """Exhaustive search over a regular grid of values for every free cell.

    Each channel's completions are enumerated separately; at each ``K`` the
    distinct sets of balanced assignments are reduced to their minimal
    elements and combined across channels.  Grid values upper-bound the
    infimum over the continuous box.

    Parameters
    ----------
    points_per_cell : int
        Grid resolution per free cell.
    max_points : int
        Cap on completions per channel; the resolution is lowered to fit.
    """

    def __init__(self, points_per_cell: int = 21, max_points: int = 200_000):
        if points_per_cell < 2:
            raise ValueError("need at least two grid points per cell")
        self.points_per_cell = points_per_cell
        self.max_points = max_points

    def resolution(self, n_free: int) -> int:
        g = self.points_per_cell
        while n_free and g > 2 and g**n_free > self.max_points:
            g -= 1
        return g

    def channel_grid(self, ch: Channel) -> np.ndarray:
        if ch.n_free == 0:
            return np.zeros((1, 0))
        g = self.resolution(ch.n_free)
        axes = [np.linspace(a, b, g) for a, b in zip(ch.lo, ch.hi)]
        pts = np.array(list(itertools.product(*axes)))
        if ch.constraint is not None:
            pts = pts[ch.constraint.value(pts) <= ch.constraint.tol]
        return pts

    def solve(self, problem: CompletionProblem, grid: np.ndarray,
              stop_below: float = 0.0) -> WorstCaseCurve:
        tol = problem.tie_tol
        dims = []
        for ch, (base, cf) in zip(problem.channels, problem._linear_maps):
            pts = self.channel_grid(ch)
            if pts.shape[0] == 0:
                return _falsified_curve(grid)
            dims.append(np.abs(base + pts @ cf))
        bsize = problem.batch.size
        p_raw = np.full(grid.size, math.nan)
        diags = [{"k": float(k), "status": "skipped"} for k in grid]
        for i in range(grid.size - 1, -1, -1):
            k = float(grid[i])
            if k >= problem.spread - tol:
                p_raw[i] = 1.0
                diags[i]["status"] = "exact"
                continue
            ok = [d <= k + tol for d in dims]
            if any(not o.any(axis=1).all() for o in ok):
                # some completion balances no assignment at all
                p_raw[i] = 0.0
                n_pat = None
            else:
                pats = [_minimal_patterns(_unique_patterns(o)) for o in ok]
                p_raw[i] = _joint_min(pats) / bsize
                n_pat = [int(p.shape[0]) for p in pats]
            diags[i].update(status="grid", patterns=n_pat)
            if p_raw[i] < stop_below:
                break
        return WorstCaseCurve(grid, p_raw, monotone_adjust(p_raw), tuple(diags), "ok")


def default_grid(problem: CompletionProblem, n_points: int = 201) -> np.ndarray:
    """Uniform grid on ``[0, spread]`` plus the breakdown point when data are attached."""
    extra = []
    if problem.data is not None and problem.restrictions.is_box:
        extra.append(breakdown_point(problem.data, problem.restrictions))
    return k_grid(problem.spread, n_points, extra)


def pbar_curve(problem: CompletionProblem, grid=None, cfg: SolverConfig | None = None,
               solver=None, stop_below: float = 0.0) -> WorstCaseCurve:
    """Worst-case balance probability at each grid ``K``.

    Parameters
    ----------
    problem : CompletionProblem
    grid : array_like, optional
        Ascending ``K`` values; see :func:`default_grid`.
    cfg : SolverConfig, optional
        Settings for the default genetic solver.
    solver : GeneticSolver or GridSolver, optional
        Overrides ``cfg``.
    stop_below : float
        The descending sweep stops after the first ``K`` whose value falls
        below this level.  ``K(alpha)`` for ``1 - alpha >= stop_below`` is
        unaffected.  The grid solver leaves lower points as NaN in ``p_raw``.

    Returns
    -------
    WorstCaseCurve
        ``status == "falsified"`` when the covariate restriction is infeasible.
    """
    grid = default_grid(problem) if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0) or np.any(grid < 0):
        raise ValueError("k grid must be nonnegative and strictly increasing")
    solver = solver or GeneticSolver(cfg)
    return solver.solve(problem, grid, stop_below)


def pbar_mod(problem: CompletionProblem, grid=None, cfg: SolverConfig | None = None,
             solver=None) -> WorstCaseCurve:
    """:func:`pbar_curve` for a problem built with a covariate model."""
    if not problem.has_constraints:
        raise ValueError("pbar_mod needs a problem built with a covariate model")
    for ch in problem.channels:
        if ch.constraint is not None and not ch.constraint.convex:
            raise ValueError("pbar_mod supports the observed-variance reading only")
    return pbar_curve(problem, grid, cfg, solver)


def k_alpha_flagged(curve: WorstCaseCurve, alpha: float) -> tuple[float, bool]:
    """Smallest grid ``K`` with ``p_tilde >= 1 - alpha`` and whether the grid saturated."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if curve.status == "falsified":
        raise FalsifiedError("worst-case curve is falsified")
    ok = np.flatnonzero(curve.p_tilde >= 1 - alpha - 1e-12)
    if ok.size == 0:
        return float(curve.k_grid[-1]), True
    return float(curve.k_grid[ok[0]]), False


def k_alpha(curve: WorstCaseCurve, alpha: float) -> float:
    """Calibrated ``K(alpha) = inf{K : p_tilde(K) >= 1 - alpha}`` over the grid."""
    return k_alpha_flagged(curve, alpha)[0]


@dataclass(frozen=True)
class CalibratedSet:
    """Identified set at the calibrated ``K(alpha)``."""

    level: float
    k: float
    interval: Interval
    saturated: bool


def calibrated_sets(bounds: BoundsCurve, curve: WorstCaseCurve,
                    alphas: Sequence[float]) -> list[CalibratedSet]:
    """``Theta_I(K(alpha))`` for each ``alpha``, evaluated exactly at ``K(alpha)``."""
    out = []
    for a in alphas:
        k, sat = k_alpha_flagged(curve, a)
        out.append(CalibratedSet(1 - a, k, bounds.at(k), sat))
    return out


def strength_of_evidence(bounds: BoundsCurve, curve: WorstCaseCurve) -> float:
    """``p_tilde(K_bp)``: worst-case probability that the sign of the effect is identified."""
    return curve.at(bounds.breakdown)


@dataclass(frozen=True)
class MilpModel:
    """Mixed-integer program ``min c'x`` s.t. ``row_lo <= A x <= row_hi`` and variable bounds."""

    c: np.ndarray
    a: np.ndarray
    row_lo: np.ndarray
    row_hi: np.ndarray
    var_lo: np.ndarray
    var_hi: np.ndarray
    integrality: np.ndarray
    var_names: tuple
    row_names: tuple


def milp_model(problem: CompletionProblem, k: float, margin: float = 1e-6) -> MilpModel:
    """Big-M program whose optimum is the worst-case balance probability at ``k``.

    Per assignment ``j`` and channel ``c`` the binaries ``zcp_j`` and
    ``zcm_j`` indicate ``D_c <= k`` and ``D_c >= -k``; ``z3_j`` must be 1 when
    every indicator is 1.  An indicator may be 0 only when its inequality
    fails by at least ``margin``, so exact ties count as balanced despite
    solver feasibility tolerances.  The big-M constant of a channel is its
    value range plus ``k + margin``, which bounds every row over the box.
    """
    bsize = problem.batch.size
    names = []
    for ch in problem.channels:
        names += [f"{ch.name}_{int(i)}" for i in ch.free]
    n_cont = len(names)
    tags = [ch.name.replace("y", "z") for ch in problem.channels]
    for tag in tags:
        names += [f"{tag}p_{j}" for j in range(bsize)]
        names += [f"{tag}m_{j}" for j in range(bsize)]
    names += [f"z3_{j}" for j in range(bsize)]
    nv = len(names)
    index = {nm: i for i, nm in enumerate(names)}
    rows, lo_r, hi_r, rnames = [], [], [], []

    def add(coefs: dict, lo, hi, name):
        r = np.zeros(nv)
        for key, val in coefs.items():
            r[index[key]] += val
        rows.append(r)
        lo_r.append(lo)
        hi_r.append(hi)
        rnames.append(name)

    for ch, tag, (base, cf) in zip(problem.channels, tags, problem._linear_maps):
        big_m = ch.range + k + margin
        cell_names = [f"{ch.name}_{int(i)}" for i in ch.free]
        for j in range(bsize):
            lin = {nm: float(cf[q, j]) for q, nm in enumerate(cell_names)}
            neg = {nm: -v for nm, v in lin.items()}
            zp, zm = f"{tag}p_{j}", f"{tag}m_{j}"
            # M zp >= k + margin - D ; M (1 - zp) >= D - k
            add({**lin, zp: big_m}, k + margin - base[j], math.inf, f"{tag}p_lo_{j}")
            add({**lin, zp: big_m}, -math.inf, big_m + k - base[j], f"{tag}p_hi_{j}")
            # M zm >= D + k + margin ; M (1 - zm) >= -k - D
            add({**neg, zm: big_m}, base[j] + k + margin, math.inf, f"{tag}m_lo_{j}")
            add({**neg, zm: big_m}, -math.inf, big_m + k + base[j], f"{tag}m_hi_{j}")
    n_ind = 2 * len(tags)
    for j in range(bsize):
        inds = [f"{t}{s}_{j}" for t in tags for s in ("p", "m")]
        add({**{nm: 1.0 for nm in inds}, f"z3_{j}": -1.0}, -math.inf, n_ind - 1.0, f"link_{j}")
        for nm in inds:
            add({f"z3_{j}": 1.0, nm: -1.0}, -math.inf, 0.0, f"cap_{nm}")
    c = np.zeros(nv)
    c[n_cont + 2 * len(tags) * bsize:] = 1.0 / bsize
    var_lo = np.r_[problem.gene_lo, np.zeros(nv - n_cont)]
    var_hi = np.r_[problem.gene_hi, np.ones(nv - n_cont)]
    integ = np.r_[np.zeros(n_cont), np.ones(nv - n_cont)]
    return MilpModel(c, np.array(rows), np.array(lo_r), np.array(hi_r), var_lo, var_hi,
                     integ, tuple(names), tuple(rnames))


def _fmt(v: float) -> str:
    return repr(float(v))


def _expr(coefs, names) -> str:
    terms = []
    for i in np.flatnonzero(coefs):
        v = float(coefs[i])
        sign = "-" if v < 0 else "+"
        terms.append(f"{sign} {_fmt(abs(v))} {names[i]}")
    lines, cur = [], []
    for t in terms:
        cur.append(t)
        if len(cur) == 6:
            lines.append(" ".join(cur))
            cur = []
    if cur:
        lines.append(" ".join(cur))
    return "\n   ".join(lines) if lines else "0"


def export_milp(problem: CompletionProblem, k: float, margin: float = 1e-6) -> str:
    """The big-M program of :func:`milp_model` as CPLEX LP text."""
    mod = milp_model(problem, k, margin)
    out = [
        f"\\ worst-case balance probability at k = {_fmt(k)}",
        f"\\ assignments = {problem.batch.size}, free cells = {problem.n_genes}",
        "Minimize",
        f" obj: {_expr(mod.c, mod.var_names)}",
        "Subject To",
    ]
    for r, lo, hi, nm in zip(mod.a, mod.row_lo, mod.row_hi, mod.row_names):
        e = _expr(r, mod.var_names)
        if math.isfinite(lo):
            out.append(f" {nm}: {e} >= {_fmt(lo)}")
        else:
            out.append(f" {nm}: {e} <= {_fmt(hi)}")
    out.append("Bounds")
    n_cont = int(np.count_nonzero(mod.integrality == 0))
    for i in range(n_cont):
        out.append(f" {_fmt(mod.var_lo[i])} <= {mod.var_names[i]} <= {_fmt(mod.var_hi[i])}")
    out.append("Binaries")
    bins = [mod.var_names[i] for i in np.flatnonzero(mod.integrality)]
    for start in range(0, len(bins), 8):
        out.append(" " + " ".join(bins[start:start + 8]))
    out.append("End")
    return "\n".join(out) + "\n"
