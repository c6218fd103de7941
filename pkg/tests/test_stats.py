import math

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st
from scipy import special, stats as sps

from flatsurr import stats


def test_frozen_welch_reference():
    # values produced once by an independent reference implementation
    t, df, p = stats.welch_t_test([1.1, 1.2, 1.3, 1.4], [0.9, 1.0, 1.1, 1.2], "greater")
    assert t == pytest.approx(2.1908902300206647, rel=1e-12)
    assert df == pytest.approx(5.999999999999998, rel=1e-12)
    assert p == pytest.approx(0.035493827160493784, rel=1e-10)


def test_alternatives_are_consistent():
    a, b = [3.1, 2.9, 3.4, 3.0], [2.0, 2.5, 2.2]
    _, _, pg = stats.welch_t_test(a, b, "greater")
    _, _, pl = stats.welch_t_test(a, b, "less")
    _, _, p2 = stats.welch_t_test(a, b)
    assert pg + pl == pytest.approx(1.0, abs=1e-14)
    assert p2 == pytest.approx(2 * min(pg, pl), rel=1e-12)


def test_tiny_p_values_resolve():
    t, df, p = stats.welch_t_test([5.0, 5.0001, 5.0002], [1.0, 1.0001, 1.0002], "greater")
    assert 0 < p < 1e-15
    assert p == pytest.approx(sps.ttest_ind([5.0, 5.0001, 5.0002], [1.0, 1.0001, 1.0002],
                                            equal_var=False, alternative="greater").pvalue,
                              rel=1e-6)


def test_errors():
    with pytest.raises(ValueError):
        stats.welch_t_test([1.0], [1.0, 2.0])
    with pytest.raises(stats.DegenerateVariance):
        stats.welch_t_test([1.0, 1.0], [2.0, 2.0])
    with pytest.raises(ValueError):
        stats.welch_t_test([1.0, 2.0], [1.0, 2.0], "bigger")


def test_one_zero_variance_sample_is_fine():
    t, df, p = stats.welch_t_test([1.0, 1.0, 1.0], [0.0, 0.5, 1.0], "greater")
    assert math.isfinite(t) and 0 < p < 1


@settings(max_examples=200, deadline=None)
@given(st.floats(0.05, 50), st.floats(0.05, 50), st.floats(0, 1))
def test_betainc_matches_reference(a, b, x):
    assert stats.betainc(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=1e-10, abs=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30), st.floats(0.5, 200))
@example(1.192092896e-07, 15.0)  # near t = 0, where x = df/(df+t²) rounds toward 1
def test_t_sf_matches_reference(t, df):
    assert stats.t_sf(t, df) == pytest.approx(sps.t.sf(t, df), rel=1e-9, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_shift_invariance_and_symmetry(seed, shift):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=5), rng.normal(size=7)
    t, df, p = stats.welch_t_test(a, b)
    t2, df2, p2 = stats.welch_t_test(a + shift, b + shift)
    assert p2 == pytest.approx(p, rel=1e-6, abs=1e-12)
    tr, dfr, pr = stats.welch_t_test(b, a)
    assert tr == pytest.approx(-t) and dfr == pytest.approx(df) and pr == pytest.approx(p)
