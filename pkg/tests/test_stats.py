import math

import numpy as np
import pytest
import scipy.special
import scipy.stats
from hypothesis import assume, given
from hypothesis import strategies as st

from fedglu.stats import (DegenerateVariance, TooFewPatients, betainc, paired_t_test, profile_bins, rankdata,
                          spearman_rho, t_two_sided_p)

# Student's sleep data: extra sleep of drug 2 minus drug 1, ten patients.
SLEEP_DELTAS = [1.2, 2.4, 1.3, 1.3, 0.0, 1.0, 1.8, 0.8, 4.6, 1.4]
# IQ vs hours of TV per week, the standard ten-person Spearman example.
IQ = [106, 100, 86, 101, 99, 103, 97, 113, 112, 110]
TV = [7, 27, 2, 50, 28, 29, 20, 12, 6, 17]


def test_sleep_data_reference_values():
    res = paired_t_test(SLEEP_DELTAS)
    assert round(res.statistic, 4) == 4.0621
    assert round(res.p_value, 6) == 0.002833
    assert res.df == 9


def test_iq_tv_reference_values():
    res = spearman_rho(IQ, TV)
    assert res.statistic == pytest.approx(-29 / 165, abs=1e-12)
    assert round(res.p_value, 4) == 0.6272


def test_t_one_to_four():
    res = paired_t_test([1, 2, 3, 4])
    assert res.statistic == pytest.approx(2.5 * 2 / math.sqrt(5 / 3))
    # tabulated: two-sided 5% critical value for 3 df is 3.182, 2% is 4.541
    assert 0.02 < res.p_value < 0.05


def test_t_degenerate_and_symmetric():
    with pytest.raises(DegenerateVariance):
        paired_t_test([2.0, 2.0, 2.0])
    with pytest.raises(DegenerateVariance):
        paired_t_test([1.0])
    res = paired_t_test([-1.0, 1.0])
    assert res.statistic == 0.0 and res.p_value == pytest.approx(1.0)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=30))
def test_t_matches_scipy_and_is_odd(d):
    assume(np.std(d) > 1e-6)
    res = paired_t_test(d)
    ref = scipy.stats.ttest_1samp(d, 0.0)
    assert res.statistic == pytest.approx(ref.statistic, rel=1e-9, abs=1e-12)
    assert res.p_value == pytest.approx(ref.pvalue, rel=1e-7, abs=1e-12)
    neg = paired_t_test([-v for v in d])
    assert neg.statistic == -res.statistic and neg.p_value == res.p_value


@given(st.floats(0.5, 60), st.floats(0.5, 60), st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    assert betainc(a, b, x) == pytest.approx(float(scipy.special.betainc(a, b, x)), abs=1e-10)


def test_t_p_limits():
    assert t_two_sided_p(0.0, 5) == 1.0
    assert t_two_sided_p(math.inf, 5) == 0.0


def test_rankdata_ties():
    np.testing.assert_array_equal(rankdata([10, 20, 20, 5]), [2, 3.5, 3.5, 1])


def test_spearman_extremes():
    assert spearman_rho([1, 2, 3, 4], [2, 4, 8, 16]).statistic == 1.0
    assert spearman_rho([1, 2, 3, 4], [9, 7, 3, 0]).statistic == -1.0
    with pytest.raises(DegenerateVariance):
        spearman_rho([1, 2, 3], [5, 5, 5])
    with pytest.raises(DegenerateVariance):
        spearman_rho([1, 2], [1, 2])


def test_spearman_hand_ranked():
    # ranks x: 1..5 ; ranks y: 2,1,4,3,5 ; d^2 sum = 1+1+1+1+0 = 4 ; rho = 1 - 6*4/(5*24) = 0.8
    assert spearman_rho([1, 2, 3, 4, 5], [20, 10, 40, 30, 50]).statistic == pytest.approx(0.8)


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=25, unique_by=lambda t: t[0]))
def test_spearman_matches_scipy_and_monotone_invariant(pts):
    x, y = np.array(pts).T
    assume(np.ptp(y) > 0)
    res = spearman_rho(x, y)
    ref = scipy.stats.spearmanr(x, y)
    assert res.statistic == pytest.approx(ref.statistic, abs=1e-12)
    if abs(res.statistic) < 1:
        assert res.p_value == pytest.approx(ref.pvalue, rel=1e-6, abs=1e-12)
    tx, ty = np.exp(x / 50), y ** 3
    # skip cases where rounding in the transform merges distinct values into ties
    assume((rankdata(tx) == rankdata(x)).all() and (rankdata(ty) == rankdata(y)).all())
    assert spearman_rho(tx, ty).statistic == pytest.approx(res.statistic, abs=1e-12)


def test_profile_bins_equal_count():
    pct = {f"p{i:02d}": float(i) for i in range(20)}
    imp = {p: float(i) for i, p in enumerate(sorted(pct))}
    bins = profile_bins(pct, imp, "hypo", 10)
    assert [len(b.patients) for b in bins.bins] == [2] * 10
    his = [b.hi for b in bins.bins]
    los = [b.lo for b in bins.bins]
    assert his == sorted(his) and all(lo <= hi for lo, hi in zip(los, his))
    assert bins.bins[0].mean_improvement == 0.5 and bins.bins[0].var_improvement == 0.25


def test_profile_bins_tie_break_by_id():
    pct = {"b": 1.0, "a": 1.0, "c": 1.0, "d": 2.0}
    bins = profile_bins(pct, dict.fromkeys(pct, 0.0), "hyper", 2)
    assert bins.bins[0].patients == ["a", "b"]
    assert bins.assignment["c"] == 1


def test_profile_bins_errors():
    with pytest.raises(TooFewPatients):
        profile_bins({"a": 1.0}, {"a": 0.0}, "hypo", 10)
    with pytest.raises(ValueError):
        profile_bins({"a": 1.0}, {"a": 0.0}, "normal", 1)
