import math

import mpmath
import pytest

from sdidml.inference import (
    NORMAL,
    critical_value,
    fmt7,
    normal_cdf,
    summarize_inference,
    t_cdf,
    t_ppf,
    two_sided_p,
)


def mp_t_cdf(t, df):
    # independent oracle: integrate the t density
    c = mpmath.gamma((df + 1) / 2) / (mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / 2))
    f = lambda x: c * (1 + x * x / df) ** (-(df + 1) / 2)
    return float(mpmath.mpf("0.5") + mpmath.quad(f, [0, t]))


@pytest.mark.parametrize("t,df", [(0.3, 3), (-1.7, 10), (2.5, 281), (4.0, 1), (-0.51, 30)])
def test_t_cdf_matches_quadrature(t, df):
    assert t_cdf(t, df) == pytest.approx(mp_t_cdf(t, df), abs=1e-12)


@pytest.mark.parametrize("df", [1, 5, 29, 281])
def test_t_ppf_inverts_cdf(df):
    q = t_ppf(0.975, df)
    assert mp_t_cdf(q, df) == pytest.approx(0.975, abs=1e-12)


def test_normal_cdf_symmetry():
    for x in (0.0, 0.7, 1.959964, 4.2):
        assert normal_cdf(x) + normal_cdf(-x) == pytest.approx(1.0, abs=1e-15)


def test_normal_critical_value_is_fixed_constant():
    assert critical_value(NORMAL) == 1.959964
    assert normal_cdf(1.959964) == pytest.approx(0.975, abs=1e-7)


def test_p_value_at_zero_is_one():
    assert two_sided_p(0.0) == 1.0
    assert two_sided_p(0.0, 12) == pytest.approx(1.0)


def test_wald_interval_contains_estimate():
    inf = summarize_inference(0.3, 0.1, 40)
    assert inf.ci_low < 0.3 < inf.ci_high
    assert inf.statistic == pytest.approx(3.0)


def test_nonpositive_se_rejected():
    with pytest.raises(ValueError):
        summarize_inference(0.1, 0.0)


def test_fmt7():
    assert fmt7(-0.11085146092600001) == "-0.1108515"
    assert fmt7(math.nan) == "NA"
    assert fmt7(None) == "NA"
