"""Finite-population instrumental variables under noncompliance.

Notation: ``Z`` is the binary instrument, ``X = X(Z)`` the realized
treatment, ``U = Y(0)`` and ``beta = Y(1) - Y(0)``.  Compliance types are
``c`` (complier), ``a`` (always taker), ``n`` (never taker), and ``d``
(defier).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .bounds import Interval
from .design import AssignmentBatch
from .population import DataError, _as_binary_vector, _as_float_vector, _broadcast_bounds, _check_within
from .worstcase import Channel, CompletionProblem, SolverConfig, WorstCaseCurve, pbar_curve


class RelevanceError(DataError):
    """The instrument does not move the treatment rate."""


@dataclass(frozen=True, eq=False)
class IvData:
    """Observed outcome, treatment, and instrument.

    Parameters
    ----------
    y, x, z : array_like, shape (N,)
    bounds : array_like
        Global ``(y_min, y_max)`` pair or ``(N, 2)`` per-unit bounds.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    bounds: np.ndarray = (0.0, 1.0)

    def __post_init__(self):
        y = _as_float_vector(self.y, "y")
        n = y.size
        x = _as_binary_vector(self.x, "x", n)
        z = _as_binary_vector(self.z, "z", n)
        n1 = int(z.sum())
        if n1 in (0, n):
            raise DataError("instrument is constant")
        lo, hi = _broadcast_bounds(self.bounds, n)
        _check_within(y, lo, hi, "y")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "bounds", np.column_stack([lo, hi]))

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def n1(self) -> int:
        return int(self.z.sum())

    @property
    def lo(self) -> np.ndarray:
        return self.bounds[:, 0]

    @property
    def hi(self) -> np.ndarray:
        return self.bounds[:, 1]

    def _mean(self, v: np.ndarray, zval: int) -> float:
        return float(v[self.z == zval].mean())

    @property
    def y_on(self) -> float:
        return self._mean(self.y, 1)

    @property
    def y_off(self) -> float:
        return self._mean(self.y, 0)

    @property
    def x_on(self) -> float:
        return self._mean(self.x.astype(float), 1)

    @property
    def x_off(self) -> float:
        return self._mean(self.x.astype(float), 0)

    @property
    def first_stage(self) -> float:
        """``pi``, the instrument-on minus instrument-off treatment rate."""
        return self.x_on - self.x_off

    @property
    def one_sided(self) -> bool:
        """No unit with ``Z = 0`` is treated."""
        return not bool(np.any(self.x[self.z == 0] == 1))


def wald(data: IvData) -> float:
    """Ratio of the instrument-arm outcome difference to the first stage."""
    pi = data.first_stage
    if abs(pi) < 1e-14:
        raise RelevanceError("first stage is zero: treatment rates agree across instrument arms")
    return (data.y_on - data.y_off) / pi


@dataclass(frozen=True, eq=False)
class IvPopulation:
    """Science table for the instrument setting.

    Parameters
    ----------
    y1, y0 : array_like
        Potential outcomes.
    x1, x0 : array_like of {0, 1}
        Potential treatments under ``Z = 1`` and ``Z = 0``.
    z : array_like of {0, 1}
        Realized instrument.
    bounds : array_like
    """

    y1: np.ndarray
    y0: np.ndarray
    x1: np.ndarray
    x0: np.ndarray
    z: np.ndarray
    bounds: np.ndarray = (0.0, 1.0)

    def __post_init__(self):
        y1 = _as_float_vector(self.y1, "y1")
        n = y1.size
        y0 = _as_float_vector(self.y0, "y0", n)
        for name, val in (("y1", y1), ("y0", y0)):
            object.__setattr__(self, name, val)
        for name in ("x1", "x0", "z"):
            object.__setattr__(self, name, _as_binary_vector(getattr(self, name), name, n))
        lo, hi = _broadcast_bounds(self.bounds, n)
        _check_within(y1, lo, hi, "y1")
        _check_within(y0, lo, hi, "y0")
        object.__setattr__(self, "bounds", np.column_stack([lo, hi]))

    @property
    def types(self) -> np.ndarray:
        t = np.full(self.y1.size, "n", dtype="<U1")
        t[(self.x1 == 1) & (self.x0 == 0)] = "c"
        t[(self.x1 == 1) & (self.x0 == 1)] = "a"
        t[(self.x1 == 0) & (self.x0 == 1)] = "d"
        return t

    @property
    def x(self) -> np.ndarray:
        return np.where(self.z == 1, self.x1, self.x0)

    @property
    def beta(self) -> np.ndarray:
        return self.y1 - self.y0

    def observed(self) -> IvData:
        y = np.where(self.x == 1, self.y1, self.y0)
        return IvData(y, self.x, self.z, self.bounds)

    def with_instrument(self, z) -> "IvPopulation":
        return IvPopulation(self.y1, self.y0, self.x1, self.x0, z, self.bounds)

    def _type_mean(self, typ: str, zval: int | None) -> float:
        sel = self.types == typ
        if zval is not None:
            sel &= self.z == zval
        if not sel.any():
            return math.nan
        return float(self.beta[sel].mean())

    @cached_property
    def latt(self) -> float:
        """Average effect among compliers with ``Z = 1`` (treated compliers)."""
        return self._type_mean("c", 1)

    @property
    def late(self) -> float:
        return self._type_mean("c", None)

    @property
    def latt_off(self) -> float:
        """Average effect among compliers with ``Z = 0``."""
        return self._type_mean("c", 0)

    def complier_shares(self) -> tuple[float, float]:
        """``(p_1(c), p_0(c))``: shares of compliers in each instrument arm."""
        c = self.types == "c"
        if not c.any():
            raise DataError("no compliers")
        p1 = float(np.mean(self.z[c] == 1))
        return p1, 1.0 - p1


def wald_decomposition(pop: IvPopulation) -> tuple[float, float, float]:
    """Split the Wald ratio into ``Y(0)`` imbalance, always-taker, and complier terms.

    Returns
    -------
    (u_term, always_term, complier_term) : tuple of float
        Their sum equals :func:`wald` of the observed data.  Products of a
        type share and a type mean are computed as sums so that empty
        groups contribute zero.
    """
    t = pop.types
    if np.any(t == "d"):
        raise DataError("science table contains defiers")
    z1, z0 = pop.z == 1, pop.z == 0
    n1, n0 = int(z1.sum()), int(z0.sum())
    if n1 == 0 or n0 == 0:
        raise DataError("instrument is constant")
    pi = pop.observed().first_stage
    if abs(pi) < 1e-14:
        raise RelevanceError("first stage is zero")
    u = pop.y0
    u_diff = u[z1].mean() - u[z0].mean()
    b = pop.beta
    a_on = b[z1 & (t == "a")].sum() / n1
    a_off = b[z0 & (t == "a")].sum() / n0
    t1a = np.mean(t[z1] == "a")
    t0a = np.mean(t[z0] == "a")
    t1c = np.mean(t[z1] == "c")
    c_on = b[z1 & (t == "c")].sum() / n1  # T1(c) * beta1(c)
    denom = (t1a - t0a) + t1c
    return float(u_diff / pi), float((a_on - a_off) / pi), float(c_on / denom)


def latt_bounds(data: IvData, k: float, impose_bounds: bool = False) -> Interval:
    """Identified set for the treated-complier average effect under one-sided noncompliance.

    ``[wald - k / pi, wald + k / pi]``.  With ``impose_bounds`` the set is
    intersected with the range implied by the outcome bounds on the unknown
    ``Y(0)`` of treated units, which is sharp because both restrictions act
    on the same sum of unknowns.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    if not data.one_sided:
        raise DataError("two-sided noncompliance: some units with Z = 0 are treated")
    pi = data.first_stage
    if pi <= 0:
        raise DataError(f"first stage must be positive under one-sided noncompliance, got {pi}")
    w = wald(data)
    if math.isinf(k):
        lo, hi = -math.inf, math.inf
    else:
        lo, hi = w - k / pi, w + k / pi
    if impose_bounds:
        t = data.x == 1
        lo = max(lo, float(np.mean(data.y[t] - data.hi[t])))
        hi = min(hi, float(np.mean(data.y[t] - data.lo[t])))
        if lo > hi + 1e-12:
            return Interval.empty_set()
        hi = max(hi, lo)
    return Interval(lo, hi)


def iv_problem(data: IvData, batch: AssignmentBatch) -> CompletionProblem:
    """Completion problem for ``Y(0)`` balance across re-randomized instruments.

    ``Y(0)`` is observed for untreated units and free within its bounds for
    treated units.
    """
    if not data.one_sided:
        raise DataError("calibration is implemented for one-sided noncompliance only")
    if batch.n_units != data.n or batch.n_treated != data.n1:
        raise ValueError("batch does not match the instrument margin")
    free = np.flatnonzero(data.x == 1)
    values = np.where(data.x == 0, data.y, 0.0)
    ch = Channel("u", values, free, data.lo[free].copy(), data.hi[free].copy())
    return CompletionProblem(batch, (ch,))


def iv_pbar_curve(data: IvData, batch: AssignmentBatch, grid=None,
                  cfg: SolverConfig | None = None, solver=None) -> WorstCaseCurve:
    """Worst-case probability that ``|U_on - U_off| <= K`` under the instrument design."""
    return pbar_curve(iv_problem(data, batch), grid, cfg, solver)
