"""Design distributions, assignment batches, and balance probabilities.

A design is uniform over all binary vectors with a fixed number of ones
(treated units, or sampled units for simple random sampling).  Design
probabilities are evaluated over an :class:`AssignmentBatch`, which is either
the full support or a seeded Monte Carlo draw reused for every ``K`` and
every candidate completion within one analysis.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

ENUMERATION_CAP = 5_000_000
DEFAULT_BATCH_SIZE = 1600

# Absolute slack, relative to the outcome scale, for ``|dim| <= k`` so that
# exact ties survive floating-point rounding and count as balanced.
TIE_RTOL = 1e-10


def tie_tolerance(scale: float) -> float:
    """Slack added to ``k`` when testing ``|dim| <= k``."""
    return TIE_RTOL * max(1.0, abs(float(scale)))


class DesignError(ValueError):
    """Raised for invalid design specifications."""


@dataclass(frozen=True)
class DesignSpec:
    """Uniform fixed-margin design.

    Parameters
    ----------
    n_units : int
        Population size ``N``.
    n_treated : int
        Number of treated (or sampled) units ``N1``.
    kind : {"uniform_randomization", "simple_random_sampling"}
        Interpretation of the ones in an assignment vector.
    source : {"exhaustive", "monte_carlo"}
        Enumerate the full support or draw a seeded batch.
    batch_size : int
        Number of Monte Carlo draws.
    seed : int
        Seed of the Monte Carlo stream.
    cap : int
        Largest support size that may be enumerated.
    """

    n_units: int
    n_treated: int
    kind: str = "uniform_randomization"
    source: str = "exhaustive"
    batch_size: int = DEFAULT_BATCH_SIZE
    seed: int = 0
    cap: int = ENUMERATION_CAP

    def __post_init__(self):
        if self.kind not in ("uniform_randomization", "simple_random_sampling"):
            raise DesignError(f"unknown design kind {self.kind!r}")
        if self.source not in ("exhaustive", "monte_carlo"):
            raise DesignError(f"unknown assignment source {self.source!r}")
        if not 0 < self.n_treated < self.n_units:
            raise DesignError(f"need 0 < N1 < N, got N1 = {self.n_treated}, N = {self.n_units}")
        if self.batch_size < 1:
            raise DesignError("batch size must be positive")

    @property
    def support_size(self) -> int:
        return math.comb(self.n_units, self.n_treated)

    @classmethod
    def auto(cls, n_units: int, n_treated: int, batch_size: int = DEFAULT_BATCH_SIZE,
             seed: int = 0, kind: str = "uniform_randomization") -> "DesignSpec":
        """Exhaustive when the support is no larger than the batch size, else Monte Carlo."""
        source = "exhaustive" if math.comb(n_units, n_treated) <= batch_size else "monte_carlo"
        return cls(n_units, n_treated, kind=kind, source=source, batch_size=batch_size, seed=seed)


@dataclass(frozen=True, eq=False)
class AssignmentBatch:
    """Immutable collection of fixed-margin assignment vectors.

    Parameters
    ----------
    assignments : ndarray of uint8, shape (B, N)
        One assignment per row; each row sums to ``n_treated``.
    n_treated : int
        Common margin.
    exhaustive : bool
        Whether the rows are the full support of the design.
    seed : int or None
        Provenance of a Monte Carlo batch.
    """

    assignments: np.ndarray
    n_treated: int
    exhaustive: bool = False
    seed: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        a = np.ascontiguousarray(self.assignments, dtype=np.uint8)
        if a.ndim != 2:
            raise DesignError("assignments must be a 2-d array")
        if np.any(a > 1):
            raise DesignError("assignments must be binary")
        if np.any(a.sum(axis=1) != self.n_treated):
            raise DesignError(f"every assignment must have exactly {self.n_treated} ones")
        a.setflags(write=False)
        object.__setattr__(self, "assignments", a)

    @property
    def size(self) -> int:
        return int(self.assignments.shape[0])

    @property
    def n_units(self) -> int:
        return int(self.assignments.shape[1])

    @cached_property
    def contrast(self) -> np.ndarray:
        """``C[j, i] = a_ji / N1 - (1 - a_ji) / N0`` so that ``C @ v`` are the dims."""
        n1 = self.n_treated
        n0 = self.n_units - n1
        c = np.where(self.assignments == 1, 1.0 / n1, -1.0 / n0)
        c.setflags(write=False)
        return c

    def dims(self, values) -> np.ndarray:
        """Difference in means of ``values`` under every assignment."""
        return self.contrast @ np.asarray(values, dtype=float)

    def to_dict(self) -> dict:
        packed = np.packbits(self.assignments, axis=1)
        return {
            "N": self.n_units,
            "N1": self.n_treated,
            "B": self.size,
            "seed": self.seed,
            "exhaustive": self.exhaustive,
            "rows": [row.tobytes().hex() for row in packed],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AssignmentBatch":
        n = int(doc["N"])
        rows = [np.frombuffer(bytes.fromhex(h), dtype=np.uint8) for h in doc["rows"]]
        a = np.unpackbits(np.vstack(rows), axis=1)[:, :n]
        if a.shape[0] != int(doc["B"]):
            raise DesignError(f"fixture declares B = {doc['B']} but has {a.shape[0]} rows")
        return cls(a, int(doc["N1"]), bool(doc.get("exhaustive", False)), doc.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "AssignmentBatch":
        return cls.from_dict(json.loads(Path(path).read_text()))


def enumerate_assignments(spec: DesignSpec) -> AssignmentBatch:
    """All ``C(N, N1)`` assignments, ordered lexicographically by treated index set."""
    if spec.support_size > spec.cap:
        raise DesignError(
            f"C({spec.n_units}, {spec.n_treated}) = {spec.support_size} exceeds the "
            f"enumeration cap {spec.cap}; use a Monte Carlo source instead"
        )
    combos = np.fromiter(
        itertools.chain.from_iterable(itertools.combinations(range(spec.n_units), spec.n_treated)),
        dtype=np.int64,
        count=spec.support_size * spec.n_treated,
    ).reshape(spec.support_size, spec.n_treated)
    a = np.zeros((spec.support_size, spec.n_units), dtype=np.uint8)
    np.put_along_axis(a, combos, 1, axis=1)
    return AssignmentBatch(a, spec.n_treated, exhaustive=True)


def sample_assignments(spec: DesignSpec) -> AssignmentBatch:
    """``B`` uniform draws by a partial Fisher-Yates shuffle per draw.

    All draws are advanced together: at step ``t`` each row swaps position
    ``t`` with a uniform position in ``[t, N)``.
    """
    rng = np.random.Generator(np.random.Philox(spec.seed))
    n, n1, b = spec.n_units, spec.n_treated, spec.batch_size
    perm = np.tile(np.arange(n), (b, 1))
    rows = np.arange(b)
    for t in range(n1):
        j = t + rng.integers(0, n - t, size=b)
        held = perm[rows, t].copy()
        perm[rows, t] = perm[rows, j]
        perm[rows, j] = held
    a = np.zeros((b, n), dtype=np.uint8)
    np.put_along_axis(a, perm[:, :n1], 1, axis=1)
    return AssignmentBatch(a, n1, exhaustive=False, seed=spec.seed)


def make_batch(spec: DesignSpec) -> AssignmentBatch:
    """Dispatch on ``spec.source``."""
    if spec.source == "exhaustive":
        return enumerate_assignments(spec)
    return sample_assignments(spec)


def dim(values, assignment) -> float:
    """Treated-minus-control difference in means of ``values``."""
    v = np.asarray(values, dtype=float)
    a = np.asarray(assignment).astype(bool)
    if v.shape != a.shape:
        raise DesignError("values and assignment must have the same length")
    if a.all() or not a.any():
        raise DesignError("assignment has a degenerate margin")
    return float(v[a].mean() - v[~a].mean())


def max_imbalance(batch: AssignmentBatch, y1, y0) -> np.ndarray:
    """``max(|dim(y1, a)|, |dim(y0, a)|)`` for every assignment ``a`` in the batch."""
    return np.maximum(np.abs(batch.dims(y1)), np.abs(batch.dims(y0)))


def balance_probability(batch: AssignmentBatch, y1, y0, k: float) -> float:
    """Fraction of the batch under which both vectors are ``k``-balanced.

    Ties ``|dim| = k`` count as balanced.  Under an exhaustive batch this is
    the exact design probability.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    y1 = np.asarray(y1, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    scale = max(np.ptp(y1), np.ptp(y0), np.abs(y1).max(), np.abs(y0).max())
    m = max_imbalance(batch, y1, y0)
    return float(np.count_nonzero(m <= k + tie_tolerance(scale))) / batch.size
