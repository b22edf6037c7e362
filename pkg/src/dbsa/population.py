"""Finite-population data model, ingestion, and the reference populations.

A :class:`Population` is the full science table: both potential outcomes,
the realized treatment, optional covariates and sampling indicators, and
per-unit outcome bounds.  :func:`make_data` projects it to the
researcher-visible :class:`ObservedData`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate, stats


class DataError(ValueError):
    """Raised when input data violate a documented precondition."""


def _as_float_vector(values, name: str, n: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if n is not None and arr.shape[0] != n:
        raise DataError(f"{name} has length {arr.shape[0]}, expected {n}")
    arr.setflags(write=False)
    return arr


def _as_binary_vector(values, name: str, n: int | None = None) -> np.ndarray:
    raw = np.asarray(values).reshape(-1)
    if n is not None and raw.shape[0] != n:
        raise DataError(f"{name} has length {raw.shape[0]}, expected {n}")
    bad = ~np.isin(raw, (0, 1))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataError(f"{name} must be 0/1; row {row} has value {raw[row]!r}")
    arr = raw.astype(np.int8)
    arr.setflags(write=False)
    return arr


def _broadcast_bounds(bounds, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Accept a global ``(lo, hi)`` pair or an ``(N, 2)`` array of per-unit bounds."""
    b = np.asarray(bounds, dtype=float)
    if b.shape == (2,):
        lo, hi = np.full(n, b[0]), np.full(n, b[1])
    elif b.shape == (n, 2):
        lo, hi = b[:, 0].copy(), b[:, 1].copy()
    else:
        raise DataError(f"bounds must be a pair or an (N, 2) array, got shape {b.shape}")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise DataError("outcome bounds must be finite")
    if np.any(lo >= hi):
        row = int(np.flatnonzero(lo >= hi)[0])
        raise DataError(f"row {row}: lower bound {lo[row]} is not below upper bound {hi[row]}")
    lo.setflags(write=False)
    hi.setflags(write=False)
    return lo, hi


def _check_within(y: np.ndarray, lo: np.ndarray, hi: np.ndarray, name: str) -> None:
    if np.any(np.isnan(y)):
        row = int(np.flatnonzero(np.isnan(y))[0])
        raise DataError(f"{name} is missing at row {row}")
    outside = (y < lo) | (y > hi)
    if outside.any():
        row = int(np.flatnonzero(outside)[0])
        raise DataError(
            f"{name} at row {row} is {y[row]}, outside its bounds [{lo[row]}, {hi[row]}]"
        )


@dataclass(frozen=True)
class Population:
    """Full science table of a finite population.

    Parameters
    ----------
    y1, y0 : array_like, shape (N,)
        Treated and untreated potential outcomes.
    x : array_like of {0, 1}, shape (N,)
        Realized treatment.
    bounds : array_like
        Either a global ``(y_min, y_max)`` pair or an ``(N, 2)`` array.
    w : array_like, shape (N, d), optional
        Covariates.
    s : array_like of {0, 1}, shape (N,), optional
        Sampling indicators; all ones when omitted.
    """

    y1: np.ndarray
    y0: np.ndarray
    x: np.ndarray
    bounds: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0]))
    w: np.ndarray | None = None
    s: np.ndarray | None = None

    def __post_init__(self):
        y1 = _as_float_vector(self.y1, "y1")
        n = y1.shape[0]
        if n == 0:
            raise DataError("population is empty")
        y0 = _as_float_vector(self.y0, "y0", n)
        x = _as_binary_vector(self.x, "x", n)
        s = _as_binary_vector(np.ones(n) if self.s is None else self.s, "s", n)
        lo, hi = _broadcast_bounds(self.bounds, n)
        _check_within(y1, lo, hi, "y1")
        _check_within(y0, lo, hi, "y0")
        w = None
        if self.w is not None:
            w = np.asarray(self.w, dtype=float)
            if w.ndim == 1:
                w = w[:, None]
            if w.shape[0] != n:
                raise DataError(f"w has {w.shape[0]} rows, expected {n}")
            w.setflags(write=False)
        bounds = np.column_stack([lo, hi])
        bounds.setflags(write=False)
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "bounds", bounds)

    @property
    def n_units(self) -> int:
        return int(self.y1.shape[0])

    @property
    def lo(self) -> np.ndarray:
        return self.bounds[:, 0]

    @property
    def hi(self) -> np.ndarray:
        return self.bounds[:, 1]

    @property
    def ate(self) -> float:
        """Finite-population average treatment effect."""
        return float(np.mean(self.y1) - np.mean(self.y0))

    def with_assignment(self, x) -> "Population":
        """Copy of the science table under a different realized treatment."""
        return Population(self.y1, self.y0, x, self.bounds, self.w, self.s)

    def to_dict(self) -> dict:
        return {
            "n": self.n_units,
            "y1": self.y1.tolist(),
            "y0": self.y0.tolist(),
            "x": self.x.tolist(),
            "w": None if self.w is None else self.w.tolist(),
            "s": self.s.tolist(),
            "bounds": self.bounds.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Population":
        pop = cls(
            y1=doc["y1"],
            y0=doc["y0"],
            x=doc["x"],
            bounds=doc.get("bounds", (0.0, 1.0)),
            w=doc.get("w"),
            s=doc.get("s"),
        )
        if "n" in doc and int(doc["n"]) != pop.n_units:
            raise DataError(f"declared n = {doc['n']} but tables have {pop.n_units} rows")
        return pop

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path) -> "Population":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ObservedData:
    """Researcher-visible data: realized outcomes, treatment, and bounds.

    Parameters
    ----------
    y : array_like, shape (N,)
        Realized outcomes.
    x : array_like of {0, 1}, shape (N,)
        Realized treatment.
    bounds : array_like
        Global ``(y_min, y_max)`` pair or ``(N, 2)`` per-unit bounds.
    w : array_like, optional
        Covariates, shape (N, d).
    ids : sequence, optional
        Unit identifiers; defaults to ``0..N-1``.
    """

    y: np.ndarray
    x: np.ndarray
    bounds: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0]))
    w: np.ndarray | None = None
    ids: tuple | None = None

    def __post_init__(self):
        y = _as_float_vector(self.y, "y")
        n = y.shape[0]
        if n == 0:
            raise DataError("observed data are empty (no sampled units)")
        x = _as_binary_vector(self.x, "x", n)
        lo, hi = _broadcast_bounds(self.bounds, n)
        _check_within(y, lo, hi, "y")
        n1 = int(x.sum())
        if n1 == 0 or n1 == n:
            raise DataError("degenerate treatment arm: every unit has the same x")
        w = None
        if self.w is not None:
            w = np.asarray(self.w, dtype=float)
            if w.ndim == 1:
                w = w[:, None]
            if w.shape[0] != n:
                raise DataError(f"w has {w.shape[0]} rows, expected {n}")
            w.setflags(write=False)
        ids = tuple(range(n)) if self.ids is None else tuple(self.ids)
        if len(ids) != n:
            raise DataError(f"ids has length {len(ids)}, expected {n}")
        bounds = np.column_stack([lo, hi])
        bounds.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "bounds", bounds)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def n1(self) -> int:
        return int(self.x.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def lo(self) -> np.ndarray:
        return self.bounds[:, 0]

    @property
    def hi(self) -> np.ndarray:
        return self.bounds[:, 1]

    def arm_mean(self, arm: int) -> float:
        """Observed mean outcome in arm ``arm``."""
        return float(self.y[self.x == arm].mean())

    @property
    def ate_hat(self) -> float:
        """Observed difference in means."""
        return self.arm_mean(1) - self.arm_mean(0)

    @property
    def uniform_bounds(self) -> tuple[float, float] | None:
        """The common ``(y_min, y_max)`` if every unit shares it, else ``None``."""
        lo, hi = self.lo, self.hi
        if np.all(lo == lo[0]) and np.all(hi == hi[0]):
            return float(lo[0]), float(hi[0])
        return None

    @property
    def spread(self) -> float:
        """Largest possible absolute difference in means of any completed vector."""
        return float(self.hi.max() - self.lo.min())

    def canonical_key(self) -> tuple:
        """Key invariant to relabeling units.

        Exhaustive uniform designs are exchangeable, so quantities computed
        from them depend on the data only through this multiset.
        """
        rows = np.column_stack([self.x, self.y, self.lo, self.hi])
        order = np.lexsort(rows.T[::-1])
        return tuple(map(tuple, rows[order].tolist()))


def make_data(pop: Population) -> ObservedData:
    """Project a science table to the observed data (rows with ``s = 1``)."""
    keep = pop.s == 1
    if not keep.any():
        raise DataError("degenerate sample: no unit has s = 1")
    y = np.where(pop.x == 1, pop.y1, pop.y0)
    ids = tuple(int(i) for i in np.flatnonzero(keep))
    w = None if pop.w is None else pop.w[keep]
    return ObservedData(y=y[keep], x=pop.x[keep], bounds=pop.bounds[keep], w=w, ids=ids)


def load_csv(
    path,
    schema: Mapping[str, str] | None = None,
    bounds: tuple[float, float] | None = None,
) -> ObservedData:
    """Read observed data from a CSV file.

    Parameters
    ----------
    path : path-like
        File with a header row.
    schema : mapping, optional
        Renames logical columns (``y``, ``x``, ``ymin``, ``ymax``, ``s``) to
        file columns.  Covariates are any columns named ``w1, w2, ...``.
    bounds : (float, float), optional
        Global outcome bounds used when the file has no ``ymin``/``ymax``.

    Returns
    -------
    ObservedData
        Rows with ``s = 0`` are dropped; row order is otherwise preserved.
    """
    schema = dict(schema or {})
    col = {key: schema.get(key, key) for key in ("y", "x", "ymin", "ymax", "s")}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    for key in ("y", "x"):
        if col[key] not in header:
            raise DataError(f"{path}: missing required column {col[key]!r}")
    if not rows:
        raise DataError(f"{path}: no data rows")

    def column(name: str, row_idx: int, row: Mapping) -> float:
        raw = (row.get(name) or "").strip()
        try:
            value = float(raw)
        except ValueError:
            raise DataError(f"{path}: row {row_idx} has non-numeric {name} = {raw!r}") from None
        if np.isnan(value):
            raise DataError(f"{path}: row {row_idx} has missing {name}")
        return value

    y = np.array([column(col["y"], i, r) for i, r in enumerate(rows)])
    x = np.array([column(col["x"], i, r) for i, r in enumerate(rows)])
    bad_x = ~np.isin(x, (0.0, 1.0))
    if bad_x.any():
        row = int(np.flatnonzero(bad_x)[0])
        raise DataError(f"{path}: row {row} has x = {x[row]}, expected 0 or 1")
    if col["ymin"] in header and col["ymax"] in header:
        lo = np.array([column(col["ymin"], i, r) for i, r in enumerate(rows)])
        hi = np.array([column(col["ymax"], i, r) for i, r in enumerate(rows)])
        unit_bounds = np.column_stack([lo, hi])
    elif bounds is not None:
        unit_bounds = np.tile(np.asarray(bounds, dtype=float), (len(rows), 1))
    else:
        raise DataError(f"{path}: no ymin/ymax columns and no global bounds supplied")
    wcols = sorted(
        (c for c in header if c.startswith("w") and c[1:].isdigit()), key=lambda c: int(c[1:])
    )
    w = None
    if wcols:
        w = np.array([[column(c, i, r) for c in wcols] for i, r in enumerate(rows)])
    keep = np.ones(len(rows), dtype=bool)
    if col["s"] in header:
        keep = np.array([column(col["s"], i, r) for i, r in enumerate(rows)]) == 1.0
    for i in np.flatnonzero(keep):
        if not unit_bounds[i, 0] <= y[i] <= unit_bounds[i, 1]:
            raise DataError(
                f"{path}: row {i} has y = {y[i]}, outside bounds "
                f"[{unit_bounds[i, 0]}, {unit_bounds[i, 1]}]"
            )
    ids = tuple(int(i) for i in np.flatnonzero(keep))
    return ObservedData(
        y=y[keep],
        x=x[keep].astype(int),
        bounds=unit_bounds[keep],
        w=None if w is None else w[keep],
        ids=ids,
    )


def toy_population() -> Population:
    """The six-unit example population used throughout the documentation."""
    return Population(
        y1=[0.8, 0.5, 0.7, 0.6, 0.9, 0.8],
        y0=[0.1, 0.0, 0.2, 0.4, 0.1, 0.2],
        x=[0, 0, 0, 1, 1, 1],
        bounds=(0.0, 1.0),
    )


@dataclass(frozen=True)
class SurveySample:
    """Outcome values of the sampled units of a finite population.

    Parameters
    ----------
    y : array_like
        Values for the sampled units.
    pop_size : int
        Population size ``N``.
    bounds : (float, float)
        Known range of the outcome for every unit.
    """

    y: np.ndarray
    pop_size: int
    bounds: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        y = _as_float_vector(self.y, "y")
        lo, hi = float(self.bounds[0]), float(self.bounds[1])
        if not lo < hi:
            raise DataError("survey bounds must satisfy lo < hi")
        _check_within(y, np.full(y.shape, lo), np.full(y.shape, hi), "y")
        if not 0 < y.shape[0] <= int(self.pop_size):
            raise DataError(f"need 0 < n <= N, got n = {y.shape[0]}, N = {self.pop_size}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "pop_size", int(self.pop_size))
        object.__setattr__(self, "bounds", (lo, hi))

    @property
    def n(self) -> int:
        return int(self.y.shape[0])


def survey_example() -> tuple[np.ndarray, np.ndarray]:
    """The six-unit survey example: full values ``W`` and sampling indicator ``S``."""
    w = np.array([0.1, 0.0, 0.2, 0.8, 0.9, 0.5])
    s = np.array([1, 1, 1, 0, 0, 0])
    return w, s


def survey_sample(w: Sequence[float], s: Sequence[int], bounds=(0.0, 1.0)) -> SurveySample:
    """Keep the sampled entries of ``w``."""
    w = np.asarray(w, dtype=float)
    s = np.asarray(s)
    return SurveySample(y=w[s == 1], pop_size=w.shape[0], bounds=bounds)


@dataclass(frozen=True)
class DgpSpec:
    """Latent-index simulation design with nested populations.

    ``Y_i(x) = transform(beta * x + U_i)`` with ``U_i`` iid standard normal.
    Units ``i < n_max / 2`` are treated.

    Parameters
    ----------
    beta : float
        Treatment shift in the latent index.
    transform : callable
        Monotone map into ``[0, 1]``; the standard normal cdf by default.
    rho : float
        Limit treated share.
    seed : int
        Seed of the counter-based stream that draws ``U``.
    n_max : int
        Size of the largest population; smaller ones are per-arm prefixes.
    """

    beta: float = 0.9648
    transform: Callable[[np.ndarray], np.ndarray] = stats.norm.cdf
    rho: float = 0.5
    seed: int = 20240601
    n_max: int = 400

    def _limit_mean(self, shift: float) -> float:
        f = lambda u: self.transform(shift + u) * stats.norm.pdf(u)
        return float(integrate.quad(f, -np.inf, np.inf)[0])

    @property
    def mu1(self) -> float:
        """Infinite-population mean of ``Y(1)``."""
        return self._limit_mean(self.beta)

    @property
    def mu0(self) -> float:
        """Infinite-population mean of ``Y(0)``."""
        return self._limit_mean(0.0)

    @property
    def limit_ate(self) -> float:
        return self.mu1 - self.mu0


def generate_dgp(spec: DgpSpec, n: int) -> Population:
    """Population of size ``n``: the first ``n/2`` units of each arm.

    The ``U`` draws are made once for ``spec.n_max`` units, so populations
    of different sizes from the same spec are nested.
    """
    if n <= 0 or n % 2:
        raise DataError(f"population size must be a positive even integer, got {n}")
    if n > spec.n_max:
        raise DataError(f"n = {n} exceeds n_max = {spec.n_max}")
    rng = np.random.Generator(np.random.Philox(spec.seed))
    u = rng.standard_normal(spec.n_max)
    half = spec.n_max // 2
    keep = np.r_[np.arange(n // 2), half + np.arange(n // 2)]
    u = u[keep]
    x = np.r_[np.ones(n // 2, dtype=int), np.zeros(n // 2, dtype=int)]
    y1 = np.clip(spec.transform(spec.beta + u), 0.0, 1.0)
    y0 = np.clip(spec.transform(u), 0.0, 1.0)
    return Population(y1=y1, y0=y0, x=x, bounds=(0.0, 1.0))


_DGP1_Y0 = [0.706, 0.062, 0.420, 0.309, 0.649, 0.660, 0.657, 0.358, 0.274, 0.278]
_DGP1_Y1 = [0.931, 0.275, 0.770, 0.671, 0.907, 0.912, 0.911, 0.719, 0.634, 0.638]
_DGP3_Y0 = [0.0499, 0.0646, 0.2540, 0.0811, 0.0847, 0.1080, 0.0269, 0.0450, 0.0547, 0.1040]


def science_tables_appendix() -> list[Population]:
    """The three ten-unit science tables used for exact coverage studies.

    The realized assignment treats the first five units; coverage studies
    enumerate every assignment, so this choice is only a placeholder.
    """
    x = [1] * 5 + [0] * 5
    dgp2_y1 = [0.0] * 9 + [1.0]
    dgp3_y1 = _DGP3_Y0[:9] + [1.0]
    return [
        Population(y1=_DGP1_Y1, y0=_DGP1_Y0, x=x, bounds=(0.0, 1.0)),
        Population(y1=dgp2_y1, y0=[0.0] * 10, x=x, bounds=(0.0, 1.0)),
        Population(y1=dgp3_y1, y0=_DGP3_Y0, x=x, bounds=(0.0, 1.0)),
    ]
