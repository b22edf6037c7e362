import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dbsa.population import (
    DataError,
    DgpSpec,
    ObservedData,
    Population,
    generate_dgp,
    load_csv,
    make_data,
    science_tables_appendix,
    survey_example,
    survey_sample,
    toy_population,
)


def test_toy_population_ate_and_observed_data():
    pop = toy_population()
    assert pop.ate == pytest.approx(np.mean(np.array(pop.y1) - np.array(pop.y0)))
    d = make_data(pop)
    assert (d.n, d.n1, d.n0) == (6, 3, 3)
    assert d.ate_hat == pytest.approx(2 / 3, abs=1e-12)


def test_population_rejects_out_of_bounds_outcomes():
    with pytest.raises(DataError):
        Population(y1=[0.5, 1.2], y0=[0.1, 0.2], x=[1, 0], bounds=(0, 1))


def test_observed_data_rejects_degenerate_arm():
    with pytest.raises(DataError, match="degenerate"):
        ObservedData(y=[0.1, 0.2, 0.3], x=[1, 1, 1])


def test_make_data_drops_unsampled_rows_and_rejects_empty_sample():
    pop = Population(y1=[1, 1, 0, 0], y0=[0, 0, 0, 1], x=[1, 0, 1, 0], s=[1, 1, 0, 1])
    d = make_data(pop)
    assert d.n == 3 and d.ids == (0, 1, 3)
    with pytest.raises(DataError):
        make_data(Population(y1=[1, 0], y0=[0, 0], x=[1, 0], s=[0, 0]))


def test_population_json_round_trip(tmp_path):
    pop = science_tables_appendix()[0]
    path = tmp_path / "pop.json"
    pop.to_json(path)
    back = Population.from_json(path)
    np.testing.assert_array_equal(back.y1, pop.y1)
    np.testing.assert_array_equal(back.x, pop.x)


def test_load_csv_reads_bounds_and_covariates(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y,x,ymin,ymax,w1\n0.2,1,0,1,3\n0.4,0,0,2,4\n")
    d = load_csv(path)
    np.testing.assert_array_equal(d.hi, [1.0, 2.0])
    assert d.w.shape == (2, 1)


@pytest.mark.parametrize(
    "body, match",
    [
        ("y,x\n0.2,1\nabc,0\n", "row 1"),
        ("y,x\n0.2,1\n0.3,2\n", "row 1"),
        ("y\n0.2\n", "missing required column"),
        ("y,x\n1.5,1\n0.3,0\n", "row 0"),
    ],
)
def test_load_csv_errors_name_the_row(tmp_path, body, match):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(DataError, match=match):
        load_csv(path, bounds=(0, 1))


def test_load_csv_requires_bounds(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y,x\n0.2,1\n0.4,0\n")
    with pytest.raises(DataError, match="bounds"):
        load_csv(path)


def test_survey_example_sample():
    w, s = survey_example()
    sample = survey_sample(w, s)
    assert sample.n == 3 and sample.pop_size == 6
    assert sample.y.mean() == pytest.approx(0.1)


def test_dgp_limit_ate_for_default_beta():
    spec = DgpSpec()
    # Phi(beta / sqrt(2)) - 1/2 for the probit link
    from scipy import stats

    assert spec.limit_ate == pytest.approx(stats.norm.cdf(spec.beta / math.sqrt(2)) - 0.5, abs=1e-8)
    assert spec.limit_ate == pytest.approx(0.25, abs=0.003)


@given(st.sampled_from([10, 20, 40, 100]))
def test_dgp_populations_are_nested(n):
    spec = DgpSpec()
    small = generate_dgp(spec, n)
    big = generate_dgp(spec, 2 * n if 2 * n <= spec.n_max else n)
    half = n // 2
    big_half = big.n_units // 2
    np.testing.assert_array_equal(small.y1[:half], big.y1[:half])
    np.testing.assert_array_equal(small.y0[half:], big.y0[big_half:big_half + half])
    assert small.x.sum() == half


def test_dgp_rejects_odd_sizes():
    with pytest.raises(DataError):
        generate_dgp(DgpSpec(), 11)


def test_appendix_tables_shapes():
    tables = science_tables_appendix()
    assert len(tables) == 3
    for pop in tables:
        assert pop.n_units == 10 and int(pop.x.sum()) == 5
    assert tables[1].ate == pytest.approx(0.1)


@given(st.permutations(range(6)))
def test_canonical_key_is_invariant_to_relabeling(perm):
    d = make_data(toy_population())
    p = np.array(perm)
    e = ObservedData(d.y[p], d.x[p], d.bounds[p])
    assert e.canonical_key() == d.canonical_key()
