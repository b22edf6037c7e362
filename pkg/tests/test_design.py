import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dbsa.design import (
    AssignmentBatch,
    DesignError,
    DesignSpec,
    balance_probability,
    dim,
    enumerate_assignments,
    make_batch,
    max_imbalance,
    sample_assignments,
)
from dbsa.population import toy_population


def test_toy_enumeration_is_lexicographic():
    batch = enumerate_assignments(DesignSpec(6, 3))
    assert batch.size == 20 and batch.exhaustive
    np.testing.assert_array_equal(batch.assignments[0], [1, 1, 1, 0, 0, 0])
    np.testing.assert_array_equal(batch.assignments[-1], [0, 0, 0, 1, 1, 1])
    assert len({row.tobytes() for row in batch.assignments}) == 20


@given(st.integers(2, 9).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n - 1))))
def test_enumeration_counts_and_margins(nn):
    n, n1 = nn
    batch = enumerate_assignments(DesignSpec(n, n1))
    assert batch.size == math.comb(n, n1)
    assert np.all(batch.assignments.sum(axis=1) == n1)


def test_enumeration_cap_error_names_the_size():
    with pytest.raises(DesignError, match="exceeds the enumeration cap"):
        enumerate_assignments(DesignSpec(40, 20))


def test_sampling_is_seeded_and_has_fixed_margin():
    spec = DesignSpec(30, 12, source="monte_carlo", batch_size=500, seed=7)
    a = sample_assignments(spec)
    b = sample_assignments(spec)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert np.all(a.assignments.sum(axis=1) == 12)


def test_sampling_is_close_to_uniform():
    # every unit is treated with probability N1 / N
    spec = DesignSpec(8, 3, source="monte_carlo", batch_size=40000, seed=1)
    freq = sample_assignments(spec).assignments.mean(axis=0)
    np.testing.assert_allclose(freq, 3 / 8, atol=0.015)


def test_auto_design_switches_on_support_size():
    assert DesignSpec.auto(10, 5).source == "exhaustive"
    assert DesignSpec.auto(20, 10).source == "monte_carlo"


@pytest.mark.parametrize("n, n1", [(5, 0), (5, 5), (3, 4)])
def test_invalid_margins(n, n1):
    with pytest.raises(DesignError):
        DesignSpec(n, n1)


def test_toy_true_imbalances_and_balance_probability():
    pop = toy_population()
    assert dim(pop.y1, pop.x) == pytest.approx(0.1, abs=1e-12)
    assert dim(pop.y0, pop.x) == pytest.approx(0.4 / 3, abs=1e-12)
    batch = make_batch(DesignSpec(6, 3))
    assert balance_probability(batch, pop.y1, pop.y0, 0.15) == pytest.approx(0.6)
    assert balance_probability(batch, pop.y1, pop.y0, 1.0) == 1.0


def test_balance_probability_counts_exact_ties():
    batch = make_batch(DesignSpec(4, 2))
    y = np.array([0.0, 0.0, 1.0, 1.0])
    m = max_imbalance(batch, y, y)
    k = float(np.unique(m)[1])
    assert balance_probability(batch, y, y, k) >= np.mean(m <= k)


def test_dims_match_direct_formula(rng):
    batch = make_batch(DesignSpec(7, 3))
    v = rng.random(7)
    direct = [dim(v, a) for a in batch.assignments]
    np.testing.assert_allclose(batch.dims(v), direct, atol=1e-14)


def test_batch_round_trip(tmp_path):
    batch = make_batch(DesignSpec(11, 4, source="monte_carlo", batch_size=50, seed=3))
    path = tmp_path / "batch.json"
    batch.save(path)
    back = AssignmentBatch.load(path)
    np.testing.assert_array_equal(back.assignments, batch.assignments)
    assert back.seed == 3 and back.n_treated == 4


def test_batch_rejects_wrong_margin():
    with pytest.raises(DesignError):
        AssignmentBatch(np.array([[1, 0, 0], [1, 1, 0]]), 1)
