import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dbsa.comparators import (
    DbsaSettings,
    dbsa_intervals,
    exact_coverage,
    fisher_ci,
    fisher_pvalues,
    hoeffding_ci,
    hoeffding_half_width,
    hoeffding_n_min,
    neyman_ci,
    normal_quantile,
)
from dbsa.design import DesignSpec, make_batch
from dbsa.population import ObservedData, Population, make_data, science_tables_appendix, toy_population


def _fisher_oracle(data, c, batch):
    """Direct enumeration: impute the science table under the sharp null and re-randomize."""
    y0 = data.y - c * data.x
    obs = abs(data.ate_hat - c)
    count = 0
    for a in batch.assignments:
        y = y0 + c * a
        stat = abs(y[a == 1].mean() - y[a == 0].mean() - c)
        count += stat > obs + 1e-12
    return count / batch.size


def _data10(seed):
    rng = np.random.default_rng(seed)
    x = np.zeros(10, int)
    x[rng.choice(10, 5, replace=False)] = 1
    return ObservedData(rng.random(10), x, (0, 1))


def test_normal_quantile():
    assert normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)
    assert normal_quantile(0.5) == pytest.approx(0.0, abs=1e-12)


def test_neyman_formula():
    d = make_data(toy_population())
    ci = neyman_ci(d, 0.05)
    v = np.var([0.6, 0.9, 0.8], ddof=1) / 3 + np.var([0.1, 0.0, 0.2], ddof=1) / 3
    half = 1.959963984540054 * math.sqrt(v)
    assert ci.interval.as_tuple() == pytest.approx((2 / 3 - half, 2 / 3 + half), abs=1e-12)
    assert not ci.diagnostics["degenerate_arm"]


def test_neyman_single_unit_arm_is_flagged():
    d = ObservedData([0.1, 0.3, 0.9], [0, 0, 1], (0, 1))
    ci = neyman_ci(d, 0.1)
    assert ci.diagnostics["degenerate_arm"] and ci.diagnostics["v1"] == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_fisher_pvalues_match_enumeration(seed):
    d = _data10(seed)
    batch = make_batch(DesignSpec(10, 5))
    cs = np.linspace(-1, 1, 17)
    p = fisher_pvalues(d, cs, batch)
    np.testing.assert_allclose(p, [_fisher_oracle(d, c, batch) for c in cs])


def test_fisher_observed_effect_is_always_accepted():
    d = _data10(7)
    batch = make_batch(DesignSpec(10, 5))
    p = fisher_pvalues(d, [d.ate_hat], batch)[0]
    assert p > 0.5
    assert fisher_ci(d, 0.5, batch).interval.contains(d.ate_hat, tol=1 / 400)


def test_fisher_rejects_far_effect_for_constant_outcomes():
    d = ObservedData(np.zeros(10), [1] * 5 + [0] * 5, (0, 1))
    assert fisher_pvalues(d, [0.9], make_batch(DesignSpec(10, 5)))[0] <= 0.05


@settings(max_examples=10)
@given(st.permutations(range(10)))
def test_fisher_ci_is_invariant_to_relabeling(perm):
    d = _data10(3)
    p = np.array(perm)
    e = ObservedData(d.y[p], d.x[p], d.bounds[p])
    batch = make_batch(DesignSpec(10, 5))
    assert fisher_ci(d, 0.1, batch).interval.as_tuple() == fisher_ci(e, 0.1, batch).interval.as_tuple()


def test_hoeffding_width_and_n_min():
    d = _data10(0)
    ci = hoeffding_ci(d, 0.1)
    assert ci.interval.width == pytest.approx(8 * math.sqrt(math.log(40) / 20), abs=1e-12)
    assert hoeffding_half_width(10, 0.1) * 2 == pytest.approx(ci.interval.width, abs=1e-12)
    assert hoeffding_n_min(1.0) == pytest.approx(11.09, abs=0.01)
    # width is data independent
    assert hoeffding_ci(_data10(1), 0.1).interval.width == pytest.approx(ci.interval.width, abs=1e-12)


def test_hoeffding_midpoint():
    d = _data10(2)
    ci = hoeffding_ci(d, 0.2)
    mid = np.mean(2 * (2 * d.x - 1) * d.y)
    assert 0.5 * (ci.interval.lo + ci.interval.hi) == pytest.approx(mid, abs=1e-12)


def test_hoeffding_refuses_unequal_arms():
    with pytest.raises(ValueError, match="equal arms"):
        hoeffding_ci(make_data(Population([1, 1, 0], [0, 0, 0], [1, 0, 0])), 0.1)


def test_dbsa_intervals_are_nested_in_alpha():
    d = _data10(4)
    out = dbsa_intervals(d, [0.5, 0.2, 0.05], make_batch(DesignSpec(10, 5)))
    for a, b in zip(out, out[1:]):
        assert a.interval.is_subset(b.interval, tol=1e-12)


def test_dgp2_neyman_coverage_is_at_most_half():
    pop = science_tables_appendix()[1]
    alphas = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5]
    rep = exact_coverage(pop, ["neyman"], alphas, population_id="dgp2")
    assert rep.n_assignments == 252
    assert all(rep.coverage["neyman", a] <= 0.5 for a in alphas)


def test_coverage_is_one_when_truth_is_always_inside():
    # truth 0.5 lies inside every consensus-level interval: Hoeffding on [0, 1] at N = 6 is wider than 2
    pop = Population([1, 1, 1, 0, 0, 0], [0, 0, 0, 0, 0, 0], [1, 0, 1, 0, 1, 0])
    rep = exact_coverage(pop, ["hoeffding"], [0.1])
    assert rep.coverage["hoeffding", 0.1] == 1.0


def test_coverage_report_outputs_and_thread_independence(tmp_path):
    pop = science_tables_appendix()[2]
    args = (pop, ["neyman", "fisher"], [0.1, 0.3])
    a = exact_coverage(*args, n_jobs=1)
    b = exact_coverage(*args, n_jobs=4)
    assert a.coverage == b.coverage
    a.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "method,alpha,coverage"
    a.to_json(tmp_path / "c.json")
    assert json.loads((tmp_path / "c.json").read_text())["n_assignments"] == 252


def test_coverage_validation():
    pop = science_tables_appendix()[0]
    with pytest.raises(ValueError):
        exact_coverage(pop, [], [0.1])
    with pytest.raises(ValueError):
        exact_coverage(pop, ["bayes"], [0.1])
    with pytest.raises(ValueError):
        DbsaSettings(solver="milp")
