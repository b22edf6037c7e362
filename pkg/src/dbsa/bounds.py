"""Identified sets for the average treatment effect under approximate balance.

The free cells of potential outcome ``x`` are ``Y_i(x)`` for units with
``X_i = 1 - x``.  Under ``K``-approximate mean balance their mean must lie
within ``K`` of the observed arm mean ``Ybar_x``.  For every box-type
restriction the objective and the balance band depend on the free cells
only through their sum, so each arm's extreme mean is a clipped sum and the
ATE bounds separate across arms.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize

from .population import DataError, ObservedData, SurveySample

RESTRICTION_KINDS = (
    "uniform_bounds",
    "unit_bounds",
    "bounded_unit_effect",
    "bounded_total_effect",
    "variance_cap",
)


@dataclass(frozen=True)
class Interval:
    """Closed interval ``[lo, hi]`` or the explicit empty set."""

    lo: float
    hi: float
    empty: bool = False

    def __post_init__(self):
        if self.empty:
            object.__setattr__(self, "lo", math.nan)
            object.__setattr__(self, "hi", math.nan)
            return
        lo, hi = float(self.lo), float(self.hi)
        if lo > hi:
            raise ValueError(f"interval endpoints out of order: [{lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def empty_set(cls) -> "Interval":
        return cls(math.nan, math.nan, empty=True)

    @classmethod
    def point(cls, value: float) -> "Interval":
        return cls(value, value)

    @property
    def width(self) -> float:
        return 0.0 if self.empty else self.hi - self.lo

    def contains(self, value: float, tol: float = 0.0) -> bool:
        return (not self.empty) and self.lo - tol <= value <= self.hi + tol

    def is_subset(self, other: "Interval", tol: float = 0.0) -> bool:
        if self.empty:
            return True
        if other.empty:
            return False
        return other.lo - tol <= self.lo and self.hi <= other.hi + tol

    def as_tuple(self) -> tuple[float, float]:
        return (self.lo, self.hi)


@dataclass(frozen=True)
class RestrictionSet:
    """Outcome restriction combined with approximate balance.

    Parameters
    ----------
    kind : str
        One of ``uniform_bounds``, ``unit_bounds``, ``bounded_unit_effect``,
        ``bounded_total_effect``, ``variance_cap``.
    m : float, optional
        Sensitivity constant ``M`` for the last three kinds.
    """

    kind: str = "uniform_bounds"
    m: float | None = None

    def __post_init__(self):
        if self.kind not in RESTRICTION_KINDS:
            raise ValueError(f"unknown restriction kind {self.kind!r}")
        needs_m = self.kind in ("bounded_unit_effect", "bounded_total_effect", "variance_cap")
        if needs_m and (self.m is None or self.m < 0):
            raise ValueError(f"{self.kind} requires a nonnegative constant m")

    @property
    def is_box(self) -> bool:
        """Whether the restriction only constrains each free cell to an interval."""
        return self.kind != "bounded_total_effect"


def _arm_ks(k) -> tuple[float, float]:
    """Split ``k`` into ``(k for Y(1), k for Y(0))``."""
    if np.ndim(k) == 0:
        k1 = k0 = float(k)
    else:
        k1, k0 = (float(v) for v in k)
    if k1 < 0 or k0 < 0 or math.isnan(k1) or math.isnan(k0):
        raise ValueError("k must be nonnegative")
    return k1, k0


def free_cell_boxes(data: ObservedData, restrictions: RestrictionSet = RestrictionSet()):
    """Per-arm boxes for the unknown potential outcomes.

    Returns
    -------
    dict
        ``{x: (index, lo, hi)}`` where ``index`` lists the units whose
        ``Y_i(x)`` is unknown.  A box with ``lo > hi`` signals an empty
        restriction set.
    """
    if restrictions.kind == "uniform_bounds" and data.uniform_bounds is None:
        raise DataError("uniform_bounds requires a common (y_min, y_max) for all units")
    out = {}
    for arm in (1, 0):
        idx = np.flatnonzero(data.x == 1 - arm)
        lo = data.lo[idx].copy()
        hi = data.hi[idx].copy()
        if restrictions.kind == "bounded_unit_effect":
            lo = np.maximum(lo, data.y[idx] - restrictions.m)
            hi = np.minimum(hi, data.y[idx] + restrictions.m)
        elif restrictions.kind == "variance_cap":
            n_arm = int(np.sum(data.x == arm))
            half = 2.0 * math.sqrt(n_arm * restrictions.m)
            center = data.arm_mean(arm)
            lo = np.maximum(lo, center - half)
            hi = np.minimum(hi, center + half)
        out[arm] = (idx, lo, hi)
    return out


def _arm_sum_range(data: ObservedData, arm: int, k: float, lo: np.ndarray, hi: np.ndarray):
    """Feasible range of the free-cell sum for arm ``arm``, or ``None`` if empty."""
    if np.any(lo > hi):
        return None
    n_free = lo.shape[0]
    smin, smax = float(lo.sum()), float(hi.sum())
    if math.isfinite(k):
        center = data.arm_mean(arm)
        smin = max(smin, n_free * (center - k))
        smax = min(smax, n_free * (center + k))
    scale = max(1.0, abs(smin), abs(smax))
    if smin > smax + 1e-12 * scale:
        return None
    return smin, max(smin, smax)


def arm_mean_bounds(data: ObservedData, arm: int, k: float,
                    restrictions: RestrictionSet = RestrictionSet()):
    """``(LB_K(x), UB_K(x))`` for the population mean of ``Y(x)``, or ``None`` if empty."""
    idx, lo, hi = free_cell_boxes(data, restrictions)[arm]
    rng = _arm_sum_range(data, arm, k, lo, hi)
    if rng is None:
        return None
    fixed = float(data.y[data.x == arm].sum())
    return (fixed + rng[0]) / data.n, (fixed + rng[1]) / data.n


def fill_to_sum(lo: np.ndarray, hi: np.ndarray, target: float) -> np.ndarray:
    """A point of the box ``[lo, hi]`` whose coordinates sum to ``target``.

    Cells are raised from ``lo`` one at a time in index order.  Every cell
    has the same marginal effect on a mean, so this greedy fill attains any
    feasible sum.
    """
    slack = hi - lo
    need = target - lo.sum()
    if need < -1e-9 * max(1.0, abs(target)) or need > slack.sum() + 1e-9 * max(1.0, abs(target)):
        raise ValueError("target sum is outside the box")
    cum = np.cumsum(slack)
    prev = np.r_[0.0, cum[:-1]]
    raise_by = np.clip(need - prev, 0.0, slack)
    return lo + raise_by


def extreme_completion(data: ObservedData, k, which: str,
                       restrictions: RestrictionSet = RestrictionSet()):
    """Completed ``(y1, y0)`` attaining the upper (``which="upper"``) or lower ATE bound."""
    if not restrictions.is_box:
        raise ValueError("extreme completions are only available for box restrictions")
    k1, k0 = _arm_ks(k)
    boxes = free_cell_boxes(data, restrictions)
    y1 = data.y.astype(float).copy()
    y0 = data.y.astype(float).copy()
    for arm, karm, target in ((1, k1, y1), (0, k0, y0)):
        idx, lo, hi = boxes[arm]
        rng = _arm_sum_range(data, arm, karm, lo, hi)
        if rng is None:
            return None
        want_high = (which == "upper") == (arm == 1)
        target[idx] = fill_to_sum(lo, hi, rng[1] if want_high else rng[0])
    return y1, y0


def manski_bounds(data: ObservedData, k: float) -> Interval:
    """Identified set for the ATE under bounded outcomes and ``k``-approximate balance.

    Uses the closed form ``LB_K(x) = Ybar_x N_x/N + max(y_min, Ybar_x - K) N_{1-x}/N``
    and the symmetric ``UB_K(x)``; ``k = inf`` gives the domain of consensus.
    """
    ub = data.uniform_bounds
    if ub is None:
        raise DataError("manski_bounds requires uniform outcome bounds; use lp_bounds")
    k1, k0 = _arm_ks(k)
    ymin, ymax = ub
    n = data.n
    out = {}
    for arm, karm in ((1, k1), (0, k0)):
        mean = data.arm_mean(arm)
        n_arm = int(np.sum(data.x == arm))
        lb = mean * n_arm / n + max(ymin, mean - karm) * (n - n_arm) / n
        ubx = mean * n_arm / n + min(ymax, mean + karm) * (n - n_arm) / n
        out[arm] = (lb, ubx)
    return Interval(out[1][0] - out[0][1], out[1][1] - out[0][0])


def _total_effect_lp(data: ObservedData, k1: float, k0: float, m: float, sense: int):
    """Optimize the ATE under a budget on the sum of absolute unit effects.

    Variables are the free cells (``a`` for controls' ``Y(1)``, ``b`` for
    treated units' ``Y(0)``) followed by one epigraph variable per unit.
    """
    n = data.n
    treated = np.flatnonzero(data.x == 1)
    control = np.flatnonzero(data.x == 0)
    n1, n0 = treated.size, control.size
    nv = n0 + n1 + n
    ia = np.arange(n0)
    ib = n0 + np.arange(n1)
    it = n0 + n1 + np.arange(n)
    c = np.zeros(nv)
    c[ia] = 1.0 / n
    c[ib] = -1.0 / n
    rows, rhs = [], []

    def row():
        r = np.zeros(nv)
        rows.append(r)
        return r

    # |effect_i| <= t_i: control effect a_i - y_i, treated effect y_i - b_i
    for pos, unit in enumerate(control):
        r = row(); r[ia[pos]] = 1.0; r[it[unit]] = -1.0; rhs.append(data.y[unit])
        r = row(); r[ia[pos]] = -1.0; r[it[unit]] = -1.0; rhs.append(-data.y[unit])
    for pos, unit in enumerate(treated):
        r = row(); r[ib[pos]] = -1.0; r[it[unit]] = -1.0; rhs.append(-data.y[unit])
        r = row(); r[ib[pos]] = 1.0; r[it[unit]] = -1.0; rhs.append(data.y[unit])
    r = row(); r[it] = 1.0; rhs.append(m)
    for idx, arm, karm in ((ia, 1, k1), (ib, 0, k0)):
        if math.isfinite(karm):
            center = data.arm_mean(arm)
            r = row(); r[idx] = 1.0; rhs.append(idx.size * (center + karm))
            r = row(); r[idx] = -1.0; rhs.append(-idx.size * (center - karm))
    bounds = (
        [(data.lo[u], data.hi[u]) for u in control]
        + [(data.lo[u], data.hi[u]) for u in treated]
        + [(0.0, None)] * n
    )
    res = optimize.linprog(
        -sense * c, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds, method="highs"
    )
    if res.status == 2:
        return None
    if res.status != 0:
        raise RuntimeError(f"linear program failed: {res.message}")
    const = (data.y[treated].sum() - data.y[control].sum()) / n
    return float(c @ res.x + const)


def lp_bounds(data: ObservedData, k, restrictions: RestrictionSet = RestrictionSet()) -> Interval:
    """ATE identified set under a restriction set and ``k``-approximate balance.

    Parameters
    ----------
    data : ObservedData
    k : float or (float, float)
        Common balance tolerance, or separate tolerances for ``Y(1)`` and ``Y(0)``.
    restrictions : RestrictionSet

    Returns
    -------
    Interval
        Empty when no completion satisfies the restrictions (falsification).
    """
    k1, k0 = _arm_ks(k)
    if restrictions.is_box:
        b1 = arm_mean_bounds(data, 1, k1, restrictions)
        b0 = arm_mean_bounds(data, 0, k0, restrictions)
        if b1 is None or b0 is None:
            return Interval.empty_set()
        return Interval(b1[0] - b0[1], b1[1] - b0[0])
    hi = _total_effect_lp(data, k1, k0, restrictions.m, +1)
    if hi is None:
        return Interval.empty_set()
    lo = _total_effect_lp(data, k1, k0, restrictions.m, -1)
    return Interval(min(lo, hi), hi)


def k_bar(data: ObservedData, restrictions: RestrictionSet = RestrictionSet()) -> float:
    """Smallest ``K`` at which the balance band no longer binds in either arm.

    For uniform bounds this is ``max_x max(y_max - Ybar_x, Ybar_x - y_min)``.
    """
    if not restrictions.is_box:
        return data.spread
    out = 0.0
    for arm, (idx, lo, hi) in free_cell_boxes(data, restrictions).items():
        if np.any(lo > hi):
            continue
        center = data.arm_mean(arm)
        out = max(out, center - float(lo.mean()), float(hi.mean()) - center)
    return out


def _bound_fn(data, restrictions, side):
    def f(kk: float) -> float:
        iv = lp_bounds(data, kk, restrictions)
        if iv.empty:
            return math.nan
        return iv.lo if side == "lo" else iv.hi
    return f


def breakdown_point(data: ObservedData, restrictions: RestrictionSet = RestrictionSet()) -> float:
    """Largest ``K`` at which zero is still excluded from the identified set.

    For a positive ``ate_hat`` this is the smallest root of the lower bound
    function, which is piecewise linear with kinks where a clipped arm sum
    hits its box.  Negative ``ate_hat`` mirrors with the upper bound; zero
    ``ate_hat`` gives 0.  Returns ``inf`` if zero is never included.
    """
    ate_hat = data.ate_hat
    scale = max(1.0, data.spread)
    if abs(ate_hat) <= 1e-14 * scale:
        return 0.0
    side = "lo" if ate_hat > 0 else "hi"
    sign = 1.0 if ate_hat > 0 else -1.0
    f = _bound_fn(data, restrictions, side)
    g = lambda kk: sign * f(kk)
    if restrictions.is_box:
        kinks = {0.0}
        for arm, (idx, lo, hi) in free_cell_boxes(data, restrictions).items():
            center = data.arm_mean(arm)
            kinks.update((center - float(lo.mean()), float(hi.mean()) - center))
        kinks = sorted(v for v in kinks if v >= 0.0)
        kinks.append(kinks[-1] + 1.0)
        vals = [g(v) for v in kinks]
        if not math.isnan(vals[-1]) and vals[-1] > 0:
            return math.inf
        prev_k, prev_v = None, None
        for kk, vv in zip(kinks, vals):
            if math.isnan(vv):
                prev_k, prev_v = None, None
                continue
            if vv <= 0:
                if prev_k is None:
                    return kk
                # linear on [prev_k, kk]
                return prev_k + (kk - prev_k) * prev_v / (prev_v - vv)
            prev_k, prev_v = kk, vv
        return math.inf
    lo_k, hi_k = 0.0, data.spread
    if g(hi_k) > 0:
        return math.inf
    for _ in range(200):
        mid = 0.5 * (lo_k + hi_k)
        v = g(mid)
        if math.isnan(v) or v > 0:
            lo_k = mid
        else:
            hi_k = mid
        if hi_k - lo_k <= 1e-13 * scale:
            break
    return hi_k


def k_grid(upper: float, n_points: int = 201, extra: Sequence[float] = ()) -> np.ndarray:
    """``n_points`` uniform points on ``[0, upper]`` plus any finite ``extra`` points."""
    base = np.linspace(0.0, float(upper), int(n_points))
    pts = [v for v in extra if math.isfinite(v) and v >= 0]
    return np.unique(np.r_[base, pts])


@dataclass(frozen=True, eq=False)
class BoundsCurve:
    """Identified sets along a grid of ``K`` values."""

    k_grid: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    breakdown: float
    ate_hat: float
    k_bar: float
    data: ObservedData = field(repr=False)
    restrictions: RestrictionSet = RestrictionSet()

    @property
    def intervals(self) -> list[Interval]:
        return [
            Interval.empty_set() if math.isnan(a) else Interval(a, b)
            for a, b in zip(self.lo, self.hi)
        ]

    def at(self, k: float) -> Interval:
        """Identified set at an arbitrary ``k`` (not restricted to the grid)."""
        return lp_bounds(self.data, k, self.restrictions)

    @property
    def consensus(self) -> Interval:
        """Domain of consensus, the set at ``K = inf``."""
        return self.at(math.inf)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "lb", "ub"])
            for k, a, b in zip(self.k_grid, self.lo, self.hi):
                w.writerow([repr(float(k)), repr(float(a)), repr(float(b))])

    def summary(self) -> dict:
        return {"ate_hat": self.ate_hat, "k_bp": self.breakdown, "k_bar": self.k_bar}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))


def bounds_curve(data: ObservedData, grid=None,
                 restrictions: RestrictionSet = RestrictionSet()) -> BoundsCurve:
    """Evaluate the identified set along ``grid``.

    The default grid is 201 points on ``[0, K_bar]`` plus the breakdown point.
    """
    kb = k_bar(data, restrictions)
    bp = breakdown_point(data, restrictions)
    if grid is None:
        grid = k_grid(kb, 201, extra=(bp,))
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("k grid must be strictly increasing")
    ivs = [lp_bounds(data, k, restrictions) for k in grid]
    lo = np.array([iv.lo for iv in ivs])
    hi = np.array([iv.hi for iv in ivs])
    return BoundsCurve(grid, lo, hi, bp, data.ate_hat, kb, data, restrictions)


def survey_bounds(sample: SurveySample, k: float) -> Interval:
    """Bounds on a finite-population mean from a sample.

    The ``N - n`` unsampled values are unknown within the outcome bounds and
    their mean must lie within ``k`` of the sample mean.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    n, big_n = sample.n, sample.pop_size
    total = float(sample.y.sum())
    n_free = big_n - n
    if n_free == 0:
        return Interval.point(total / big_n)
    ymin, ymax = sample.bounds
    smin, smax = n_free * ymin, n_free * ymax
    if math.isfinite(k):
        center = total / n
        smin = max(smin, n_free * (center - k))
        smax = min(smax, n_free * (center + k))
    return Interval((total + smin) / big_n, (total + smax) / big_n)
