"""Identified sets when covariates predict the potential outcomes.

The restriction ``R^2 >= lambda`` for the regression of ``Y(x)`` on ``Q``
is imposed as ``||(I - H) Y(x)||^2 <= (1 - lambda) * N * var(Y)``, where
``H`` is the hat matrix of ``Q``.  ``(I - H)`` is linear, so with ``var(Y)``
taken from the observed outcomes the constraint is a convex quadratic in the
free cells.  Optimizing the ATE then separates into one convex program per
arm: a linear objective over a box, a slab (the balance band), and an
ellipsoid.

Two readings of ``var(Y)`` are available through ``CovariateModel.variance``:

``"observed"``
    variance of the observed outcome vector (convex; the default).
``"completed"``
    variance of the completed ``Y(x)`` itself, which makes the restriction
    exactly ``R^2 >= lambda`` but is not convex for ``0 < lambda < 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .bounds import Interval, free_cell_boxes, RestrictionSet
from .population import DataError, ObservedData


@dataclass(frozen=True, eq=False)
class CovariateModel:
    """Regression design for the covariate restriction.

    Parameters
    ----------
    q_matrix : ndarray, shape (N, p)
        Transformed covariates; the first column must be constant.
    lam : float
        Required predictive strength ``lambda`` in ``[0, 1]``.
    tss : float
        ``N * var(Y)`` of the observed outcomes, i.e. their total sum of squares.
    variance : {"observed", "completed"}
        Which variance defines the cap; see the module docstring.
    """

    q_matrix: np.ndarray
    lam: float = 0.0
    tss: float = 0.0
    variance: str = "observed"

    def __post_init__(self):
        q = np.asarray(self.q_matrix, dtype=float)
        if q.ndim != 2:
            raise DataError("q_matrix must be two-dimensional")
        if not np.allclose(q[:, 0], q[0, 0]) or q[0, 0] == 0:
            raise DataError("the first column of q_matrix must be a nonzero constant")
        gram = q.T @ q
        if np.linalg.cond(gram) > 1e12:
            raise DataError("Q'Q is singular or ill-conditioned")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.variance not in ("observed", "completed"):
            raise ValueError(f"unknown variance reading {self.variance!r}")
        q.setflags(write=False)
        object.__setattr__(self, "q_matrix", q)
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "tss", float(self.tss))

    @classmethod
    def from_data(cls, data: ObservedData, lam: float = 0.0, columns=None,
                  variance: str = "observed") -> "CovariateModel":
        """Intercept plus the selected covariate columns of ``data.w``."""
        if data.w is None:
            raise DataError("data carry no covariates")
        w = data.w if columns is None else data.w[:, list(columns)]
        q = np.column_stack([np.ones(data.n), w])
        tss = float(np.sum((data.y - data.y.mean()) ** 2))
        return cls(q, lam, tss, variance)

    def with_lambda(self, lam: float) -> "CovariateModel":
        return replace(self, lam=lam)

    @property
    def n(self) -> int:
        return int(self.q_matrix.shape[0])

    @cached_property
    def hat_matrix(self) -> np.ndarray:
        qo, _ = np.linalg.qr(self.q_matrix)
        h = qo @ qo.T
        h.setflags(write=False)
        return h

    @cached_property
    def residual_maker(self) -> np.ndarray:
        r = np.eye(self.n) - self.hat_matrix
        r.setflags(write=False)
        return r

    @cached_property
    def centering(self) -> np.ndarray:
        c = np.eye(self.n) - 1.0 / self.n
        c.setflags(write=False)
        return c

    @property
    def cap(self) -> float:
        """Right-hand side ``(1 - lambda) N var(Y)`` under the observed reading."""
        return (1.0 - self.lam) * self.tss

    def quadratic_form(self) -> np.ndarray:
        """Matrix ``G`` with the constraint written as ``y' G y <= cap_term``.

        Observed reading: ``G = I - H`` and the right side is ``cap``.
        Completed reading: ``G = (I - H) - (1 - lambda)(I - J)`` with right side 0.
        """
        if self.variance == "observed":
            return self.residual_maker
        return self.residual_maker - (1.0 - self.lam) * self.centering

    @property
    def rhs(self) -> float:
        return self.cap if self.variance == "observed" else 0.0


def ols_residuals(y, model: CovariateModel) -> np.ndarray:
    """Residuals of the least-squares fit of ``y`` on ``Q``."""
    return model.residual_maker @ np.asarray(y, dtype=float)


def r2_constraint_residual(y_x, model: CovariateModel) -> float:
    """Constraint slack; ``<= 0`` means ``y_x`` satisfies the covariate restriction.

    Observed reading: ``sum(residual^2) - (1 - lambda) N var(Y_obs)``.
    Completed reading: ``sum(residual^2) - (1 - lambda) N var(y_x)``.
    """
    y = np.asarray(y_x, dtype=float)
    rss = float(np.sum(ols_residuals(y, model) ** 2))
    if model.variance == "observed":
        return rss - model.cap
    return rss - (1.0 - model.lam) * float(np.sum((y - y.mean()) ** 2))


def _fit_tol(scale: float) -> float:
    return 1e-9 * max(1.0, scale)


@dataclass(frozen=True, eq=False)
class ResidualConstraint:
    """Covariate restriction restricted to one arm's free cells.

    With ``y = fixed + E f`` the restriction reads
    ``f' P f + 2 q' f + c0 <= 0`` where ``P = E' G E``.
    """

    p: np.ndarray
    q: np.ndarray
    c0: float
    convex: bool
    lo: np.ndarray
    hi: np.ndarray
    slab: tuple[float, float]
    scale: float

    @classmethod
    def build(cls, model: CovariateModel, fixed: np.ndarray, free: np.ndarray,
              lo: np.ndarray, hi: np.ndarray, slab=(-math.inf, math.inf)) -> "ResidualConstraint":
        g = model.quadratic_form()
        gf = g[:, free]
        p = gf[free, :] if free.size else np.zeros((0, 0))
        p = 0.5 * (p + p.T)
        q = gf.T @ fixed
        c0 = float(fixed @ g @ fixed) - model.rhs
        scale = max(1.0, model.tss, float(np.sum(fixed**2)))
        return cls(p, q, c0, model.variance == "observed", lo, hi, tuple(slab), scale)

    def value(self, f: np.ndarray) -> np.ndarray:
        """Constraint value for one point ``(n,)`` or a batch ``(P, n)``."""
        f = np.asarray(f, dtype=float)
        if f.ndim == 1:
            return float(f @ self.p @ f + 2 * self.q @ f + self.c0)
        return np.einsum("ij,jk,ik->i", f, self.p, f) + 2 * f @ self.q + self.c0

    def grad(self, f: np.ndarray) -> np.ndarray:
        return 2 * (self.p @ f + self.q)

    @property
    def tol(self) -> float:
        return _fit_tol(self.scale)

    def project(self, v: np.ndarray) -> np.ndarray:
        return project_box_slab(v, self.lo, self.hi, *self.slab)

    @cached_property
    def anchor(self) -> np.ndarray:
        """Point of the box and slab that minimizes the constraint value."""
        return minimize_quadratic(self.p, self.q, self.lo, self.hi, self.slab,
                                  restarts=1 if self.convex else 4)

    @cached_property
    def feasible(self) -> bool:
        return self.value(self.anchor) <= self.tol

    def repair(self, f: np.ndarray) -> np.ndarray:
        """Pull infeasible rows of ``f`` toward the anchor until they satisfy the constraint.

        The segment from the anchor is a convex quadratic in its parameter, so
        the largest feasible step has a closed form.
        """
        f = np.atleast_2d(np.asarray(f, dtype=float))
        vals = self.value(f)
        bad = vals > 0.0
        if not bad.any():
            return f
        a = self.anchor
        d = f[bad] - a
        ga = self.value(a)
        quad = np.einsum("ij,jk,ik->i", d, self.p, d)
        lin = 2 * d @ (self.p @ a + self.q)
        # solve quad t^2 + lin t + ga = 0 for the root in (0, 1)
        disc = np.maximum(lin**2 - 4 * quad * ga, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(quad > 1e-300, (-lin + np.sqrt(disc)) / (2 * quad),
                         np.where(lin > 0, -ga / lin, 1.0))
        t = np.clip(np.nan_to_num(t, nan=0.0), 0.0, 1.0)
        out = f.copy()
        fixed_rows = a + t[:, None] * d
        # shrink slightly until strictly feasible (guards rounding)
        for _ in range(60):
            still = self.value(fixed_rows) > 0.0
            if not still.any():
                break
            t[still] *= 0.999
            fixed_rows[still] = a + t[still, None] * d[still]
        else:
            fixed_rows[self.value(fixed_rows) > 0.0] = a
        out[bad] = fixed_rows
        return out


def project_box_slab(v, lo, hi, smin=-math.inf, smax=math.inf) -> np.ndarray:
    """Euclidean projection onto ``{f : lo <= f <= hi, smin <= sum(f) <= smax}``.

    The projection is ``clip(v - tau, lo, hi)`` for a scalar shift ``tau``.
    The clipped sum is piecewise linear and nonincreasing in ``tau`` with
    kinks at ``v - hi`` and ``v - lo``, so ``tau`` is found exactly by
    locating the bracketing kinks and interpolating.
    """
    v = np.asarray(v, dtype=float)
    f = np.clip(v, lo, hi)
    s = f.sum()
    if smin <= s <= smax or v.size == 0:
        return f
    target = smax if s > smax else smin
    taus = np.unique(np.r_[v - hi, v - lo])
    sums = np.clip(v[None, :] - taus[:, None], lo, hi).sum(axis=1)
    # sums is nonincreasing along taus; find the first kink at or below target
    pos = int(np.searchsorted(-sums, -target, side="left"))
    pos = min(max(pos, 1), taus.size - 1)
    t0, t1 = taus[pos - 1], taus[pos]
    s0, s1 = sums[pos - 1], sums[pos]
    tau = t0 if s0 == s1 else t0 + (s0 - target) * (t1 - t0) / (s0 - s1)
    return np.clip(v - tau, lo, hi)


def minimize_quadratic(p, q, lo, hi, slab=(-math.inf, math.inf), restarts=1,
                       iters=5000, seed=0) -> np.ndarray:
    """Minimize ``f'Pf + 2q'f`` over the box and slab by accelerated projected gradient.

    ``P`` may be indefinite, in which case several starts are taken and the
    best local solution is returned.
    """
    n = q.shape[0]
    if n == 0:
        return np.zeros(0)
    lmax = max(float(np.max(np.abs(np.linalg.eigvalsh(p)))), 1e-12)
    step = 1.0 / (2 * lmax)
    rng = np.random.Generator(np.random.Philox(seed))
    best, best_val = None, math.inf
    for r in range(restarts):
        start = 0.5 * (lo + hi) if r == 0 else lo + rng.random(n) * (hi - lo)
        x = project_box_slab(start, lo, hi, *slab)
        y, t = x.copy(), 1.0
        for _ in range(iters):
            x_new = project_box_slab(y - step * 2 * (p @ y + q), lo, hi, *slab)
            t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
            y = x_new + ((t - 1) / t_new) * (x_new - x)
            if np.max(np.abs(x_new - x)) <= 1e-14 * max(1.0, float(np.max(np.abs(x)))):
                x = x_new
                break
            x, t = x_new, t_new
        val = float(x @ p @ x + 2 * q @ x)
        if val < best_val:
            best, best_val = x, val
    return best


@dataclass(frozen=True)
class ArmSolution:
    """Optimum of one arm's covariate-restricted program."""

    value: float
    point: np.ndarray
    status: str
    violation: float


def _al_maximize(con: ResidualConstraint, c: np.ndarray, start: np.ndarray,
                 max_iter: int = 10_000) -> np.ndarray:
    """Maximize ``c'f`` subject to the quadratic constraint by augmented Lagrangian.

    Box and slab constraints are kept exactly by projection; only the
    quadratic enters the augmented Lagrangian.  Inner problems use
    projected gradient with backtracking from the step ``1/L``.
    """
    scale = con.scale
    mu, rho = 0.0, 10.0 / scale
    f = con.project(start)
    lip = max(float(np.max(np.abs(np.linalg.eigvalsh(con.p)))) if con.p.size else 0.0, 1e-12)
    used = 0
    for _outer in range(60):
        def phi(x):
            g = con.value(x)
            return -c @ x + (max(0.0, mu + rho * g) ** 2 - mu**2) / (2 * rho)

        def grad(x):
            g = con.value(x)
            return -c + max(0.0, mu + rho * g) * con.grad(x)

        step = 1.0 / (2 * lip * (abs(mu) + rho * scale + 1.0))
        for _ in range(400):
            used += 1
            gr = grad(f)
            cur = phi(f)
            while True:
                cand = con.project(f - step * gr)
                if phi(cand) <= cur + gr @ (cand - f) + (cand - f) @ (cand - f) / (2 * step):
                    break
                step *= 0.5
                if step < 1e-30:
                    break
            moved = np.max(np.abs(cand - f))
            f = cand
            step *= 1.5
            if moved <= 1e-13 * max(1.0, float(np.max(np.abs(f)))):
                break
            if used >= max_iter:
                break
        g = con.value(f)
        mu = max(0.0, mu + rho * g)
        if g > con.tol:
            rho *= 4.0
        if used >= max_iter or (g <= con.tol * 1e-3 and _outer > 5):
            break
    return f


def solve_arm(con: ResidualConstraint, sense: int, restarts: int = 3, seed: int = 0,
              agreement: float = 1e-5) -> ArmSolution | None:
    """Extreme free-cell sum for one arm under the covariate restriction.

    Returns ``None`` when the restriction is infeasible.  The returned point
    is made feasible by a final pull toward the anchor, then certified by a
    constraint check and agreement across restarts.
    """
    n = con.q.shape[0]
    if n == 0:
        return ArmSolution(0.0, np.zeros(0), "certified", 0.0)
    if not con.feasible:
        return None
    c = sense * np.ones(n)
    rng = np.random.Generator(np.random.Philox(seed))
    starts = [con.anchor] + [con.lo + rng.random(n) * (con.hi - con.lo) for _ in range(restarts - 1)]
    sols = []
    for s in starts:
        f = _al_maximize(con, c, s)
        f = con.repair(f)[0]
        sols.append(f)
    vals = np.array([c @ f for f in sols])
    best = sols[int(np.argmax(vals))]
    spread = float(vals.max() - vals.min())
    if not con.convex:
        status = "local"
    elif spread <= agreement * max(1.0, abs(vals.max())):
        status = "certified"
    else:
        status = "disagreement"
    slab_lo, slab_hi = con.slab
    s = best.sum()
    violation = max(
        0.0,
        con.value(best),
        float(np.max(con.lo - best, initial=0.0)),
        float(np.max(best - con.hi, initial=0.0)),
        slab_lo - s if math.isfinite(slab_lo) else 0.0,
        s - slab_hi if math.isfinite(slab_hi) else 0.0,
    )
    return ArmSolution(float(best.sum()), best, status, violation)


def arm_constraint(data: ObservedData, model: CovariateModel, arm: int, k: float,
                   restrictions: RestrictionSet = RestrictionSet()) -> tuple[ResidualConstraint, np.ndarray]:
    """Constraint object for arm ``arm`` plus the indices of its free cells."""
    if model.n != data.n:
        raise DataError("covariate model and data have different numbers of units")
    idx, lo, hi = free_cell_boxes(data, restrictions)[arm]
    fixed = np.where(data.x == arm, data.y, 0.0)
    if math.isfinite(k):
        center = data.arm_mean(arm)
        slab = (idx.size * (center - k), idx.size * (center + k))
    else:
        slab = (-math.inf, math.inf)
    return ResidualConstraint.build(model, fixed, idx, lo, hi, slab), idx


@dataclass(frozen=True)
class QclpReport:
    """Bounds plus the completions that attain them."""

    interval: Interval
    statuses: dict = field(default_factory=dict)
    points: dict = field(default_factory=dict)
    max_violation: float = 0.0


def qclp_report(data: ObservedData, model: CovariateModel, k: float,
                restrictions: RestrictionSet = RestrictionSet(), seed: int = 0) -> QclpReport:
    """ATE bounds under balance, outcome bounds, and the covariate restriction.

    ``points[(arm, sense)]`` is the completed ``Y(arm)`` vector at the optimum.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    ext, statuses, points, worst = {}, {}, {}, 0.0
    for arm in (1, 0):
        con, idx = arm_constraint(data, model, arm, k, restrictions)
        fixed_sum = float(data.y[data.x == arm].sum())
        if np.any(con.lo > con.hi):
            return QclpReport(Interval.empty_set())
        slab_lo, slab_hi = con.slab
        if con.lo.sum() > slab_hi + con.tol or con.hi.sum() < slab_lo - con.tol:
            return QclpReport(Interval.empty_set())
        for sense in (1, -1):
            sol = solve_arm(con, sense, seed=seed)
            if sol is None:
                return QclpReport(Interval.empty_set(), {"falsified": True})
            ext[(arm, sense)] = (fixed_sum + sol.value) / data.n
            statuses[(arm, sense)] = sol.status
            y = np.where(data.x == arm, data.y, 0.0)
            y[idx] = sol.point
            points[(arm, sense)] = y
            worst = max(worst, sol.violation)
    lo = ext[(1, -1)] - ext[(0, 1)]
    hi = ext[(1, 1)] - ext[(0, -1)]
    return QclpReport(Interval(min(lo, hi), max(lo, hi)), statuses, points, worst)


def qclp_bounds(data: ObservedData, model: CovariateModel, k: float,
                restrictions: RestrictionSet = RestrictionSet()) -> Interval:
    """Identified set for the ATE with the covariate restriction at ``model.lam``.

    An empty interval means the restriction is falsified by the data.
    """
    return qclp_report(data, model, k, restrictions).interval


def is_feasible(data: ObservedData, model: CovariateModel, k: float,
                restrictions: RestrictionSet = RestrictionSet()) -> bool:
    """Whether some completion satisfies balance, bounds, and the covariate restriction."""
    for arm in (1, 0):
        con, _ = arm_constraint(data, model, arm, k, restrictions)
        if np.any(con.lo > con.hi):
            return False
        slab_lo, slab_hi = con.slab
        if con.lo.sum() > slab_hi + con.tol or con.hi.sum() < slab_lo - con.tol:
            return False
        if con.q.size and not con.feasible:
            return False
    return True


def falsification_point(data: ObservedData, model: CovariateModel, k: float = math.inf,
                        tol: float = 1e-3) -> float:
    """Largest ``lambda`` in ``[0, 1]`` compatible with the data, by bisection."""
    if is_feasible(data, model.with_lambda(1.0), k):
        return 1.0
    if not is_feasible(data, model.with_lambda(0.0), k):
        return 0.0
    a, b = 0.0, 1.0
    while b - a > tol:
        mid = 0.5 * (a + b)
        if is_feasible(data, model.with_lambda(mid), k):
            a = mid
        else:
            b = mid
    return a
