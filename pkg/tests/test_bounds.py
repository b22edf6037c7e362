import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import optimize

from dbsa.bounds import (
    Interval,
    RestrictionSet,
    bounds_curve,
    breakdown_point,
    extreme_completion,
    k_bar,
    lp_bounds,
    manski_bounds,
    survey_bounds,
)
from dbsa.population import DataError, ObservedData, make_data, survey_example, survey_sample, toy_population


def _random_data(seed, n=None, unit_bounds=False):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(4, 13))
    n1 = int(rng.integers(1, n))
    x = np.zeros(n, int)
    x[rng.choice(n, n1, replace=False)] = 1
    if unit_bounds:
        lo = -rng.random(n)
        hi = 1 + rng.random(n)
        y = lo + (hi - lo) * rng.random(n)
        return ObservedData(y, x, np.column_stack([lo, hi]))
    return ObservedData(rng.random(n), x, (0.0, 1.0))


def _cell_lp(data, k, restrictions=RestrictionSet(), sense=1):
    """Oracle: optimize the ATE directly over the 2N potential-outcome cells."""
    n = data.n
    y1 = np.arange(n)
    y0 = n + np.arange(n)
    c = np.r_[np.ones(n), -np.ones(n)] / n
    bnds = []
    for arm in (1, 0):
        for i in range(n):
            if data.x[i] == arm:
                bnds.append((data.y[i], data.y[i]))
            else:
                lo, hi = data.lo[i], data.hi[i]
                if restrictions.kind == "bounded_unit_effect":
                    lo, hi = max(lo, data.y[i] - restrictions.m), min(hi, data.y[i] + restrictions.m)
                bnds.append((lo, hi))
    a, b = [], []
    if math.isfinite(k):
        for cols in (y1, y0):
            # mean over treated minus mean over controls, within +-k
            r = np.zeros(2 * n)
            r[cols] = np.where(data.x == 1, 1 / data.n1, -1 / data.n0)
            a += [r, -r]
            b += [k, k]
    res = optimize.linprog(-sense * c, A_ub=np.array(a) if a else None, b_ub=b or None,
                           bounds=bnds, method="highs")
    assert res.status == 0
    return float(c @ res.x)


def test_toy_identified_sets():
    d = make_data(toy_population())
    iv = manski_bounds(d, math.inf)
    assert iv.lo == pytest.approx(-1 / 6, abs=1e-12)
    assert iv.hi == pytest.approx(5 / 6, abs=1e-12)
    zero = manski_bounds(d, 0.0)
    assert zero.lo == pytest.approx(2 / 3, abs=1e-12) and zero.width == pytest.approx(0, abs=1e-12)


def test_toy_k_bar():
    assert k_bar(make_data(toy_population())) == pytest.approx(0.9)


@given(st.integers(0, 10_000), st.floats(0, 1.2))
def test_manski_matches_cell_lp_oracle(seed, k):
    d = _random_data(seed)
    iv = manski_bounds(d, k)
    assert iv.lo == pytest.approx(_cell_lp(d, k, sense=-1), abs=1e-9)
    assert iv.hi == pytest.approx(_cell_lp(d, k, sense=1), abs=1e-9)


@given(st.integers(0, 10_000), st.floats(0, 2.0), st.floats(0, 1.0))
def test_unit_bounds_and_bounded_effect_match_oracle(seed, k, m):
    d = _random_data(seed, unit_bounds=True)
    for r in (RestrictionSet("unit_bounds"), RestrictionSet("bounded_unit_effect", m)):
        iv = lp_bounds(d, k, r)
        if iv.empty:
            continue
        assert iv.lo == pytest.approx(_cell_lp(d, k, r, -1), abs=1e-8)
        assert iv.hi == pytest.approx(_cell_lp(d, k, r, 1), abs=1e-8)


@given(st.integers(0, 10_000))
def test_sets_are_nested_in_k(seed):
    d = _random_data(seed)
    ks = np.linspace(0, 1.2, 13)
    ivs = [lp_bounds(d, k) for k in ks]
    for a, b in zip(ivs, ivs[1:]):
        assert a.is_subset(b, tol=1e-12)
    assert ivs[0].contains(d.ate_hat, tol=1e-12)


@given(st.integers(0, 10_000))
def test_breakdown_point_is_the_root(seed):
    d = _random_data(seed)
    bp = breakdown_point(d)
    if bp == 0 or math.isinf(bp):
        return
    at = lp_bounds(d, bp)
    assert at.contains(0.0, tol=1e-9)
    edge = at.lo if d.ate_hat > 0 else at.hi
    assert edge == pytest.approx(0.0, abs=1e-9)
    if bp > 1e-6:
        assert not lp_bounds(d, bp * (1 - 1e-6)).contains(0.0)


@given(st.integers(0, 10_000), st.floats(0, 1.0))
def test_extreme_completions_attain_bounds(seed, k):
    d = _random_data(seed)
    iv = lp_bounds(d, k)
    for which, target in (("upper", iv.hi), ("lower", iv.lo)):
        y1, y0 = extreme_completion(d, k, which)
        assert np.mean(y1 - y0) == pytest.approx(target, abs=1e-12)
        for v in (y1, y0):
            gap = v[d.x == 1].mean() - v[d.x == 0].mean()
            assert abs(gap) <= k + 1e-12
            assert np.all((v >= d.lo - 1e-12) & (v <= d.hi + 1e-12))


def test_bounded_total_effect_lp():
    d = make_data(toy_population())
    assert lp_bounds(d, math.inf, RestrictionSet("bounded_total_effect", 0.0)).width == pytest.approx(0, abs=1e-9)
    wide = lp_bounds(d, math.inf, RestrictionSet("bounded_total_effect", 100.0))
    cons = manski_bounds(d, math.inf)
    assert wide.lo == pytest.approx(cons.lo, abs=1e-9) and wide.hi == pytest.approx(cons.hi, abs=1e-9)


def test_falsified_restriction_gives_empty_set():
    d = ObservedData([0.0, 0.0, 1.0, 1.0], [1, 1, 0, 0], (0, 1))
    # Y(1) of controls must be within 0.05 of 1 but also within 0.1 of 0
    iv = lp_bounds(d, 0.1, RestrictionSet("bounded_unit_effect", 0.05))
    assert iv.empty


def test_uniform_bounds_required_for_manski():
    d = _random_data(1, unit_bounds=True)
    with pytest.raises(DataError):
        manski_bounds(d, 0.1)


def test_negative_k_rejected():
    with pytest.raises(ValueError):
        lp_bounds(make_data(toy_population()), -0.1)


def test_bounds_curve_csv(tmp_path):
    d = make_data(toy_population())
    curve = bounds_curve(d)
    assert curve.consensus.as_tuple() == pytest.approx((-1 / 6, 5 / 6))
    assert curve.k_grid[-1] == pytest.approx(0.9)
    path = tmp_path / "b.csv"
    curve.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,lb,ub" and len(lines) == curve.k_grid.size + 1


def test_survey_bounds_example():
    w, s = survey_example()
    sample = survey_sample(w, s)
    assert survey_bounds(sample, math.inf).as_tuple() == pytest.approx((0.05, 0.55), abs=1e-12)
    assert survey_bounds(sample, 0).as_tuple() == pytest.approx((0.1, 0.1), abs=1e-12)


def test_interval_helpers():
    assert Interval.empty_set().empty and Interval.empty_set().width == 0.0
    assert Interval(0, 1).is_subset(Interval(-1, 2))
    with pytest.raises(ValueError):
        Interval(1, 0)
