"""Normal and Student-t tail probabilities and Wald-type inference summaries."""

import math
from typing import NamedTuple, Union

from scipy import stats

NORMAL = "normal"
Z_975 = 1.959964


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_sf(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) for Student's t with ``df`` degrees of freedom."""
    return float(stats.t.sf(t, df))


def t_cdf(t: float, df: float) -> float:
    return float(stats.t.cdf(t, df))


def t_ppf(p: float, df: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    return float(stats.t.ppf(p, df))


def critical_value(df: Union[int, str] = NORMAL) -> float:
    """Two-sided 95% critical value: 1.959964 under the normal law."""
    if df == NORMAL or df is None:
        return Z_975
    return t_ppf(0.975, df)


def two_sided_p(statistic: float, df: Union[int, str] = NORMAL) -> float:
    if df == NORMAL or df is None:
        return min(1.0, 2.0 * normal_sf(abs(statistic)))
    return min(1.0, 2.0 * t_sf(abs(statistic), df))


class Inference(NamedTuple):
    statistic: float
    p_value: float
    ci_low: float
    ci_high: float


def summarize_inference(theta: float, se: float, df: Union[int, str] = NORMAL) -> Inference:
    """Wald statistic, two-sided p-value and 95% interval for ``theta``.

    ``df`` is either :data:`NORMAL` or an integer number of degrees of
    freedom for a Student-t reference distribution.
    """
    if not se > 0:
        raise ValueError("standard error must be positive")
    stat = theta / se
    q = critical_value(df)
    return Inference(stat, two_sided_p(stat, df), theta - q * se, theta + q * se)


def fmt7(x) -> str:
    """Seven significant digits, the precision used in every report."""
    if x is None:
        return "NA"
    if isinstance(x, float) and math.isnan(x):
        return "NA"
    return f"{x:.7g}"
