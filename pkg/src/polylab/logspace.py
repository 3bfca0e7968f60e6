"""Log-domain accumulation helpers.

All partition-function arithmetic in this package lives in log domain with an
explicit -inf encoding for zero mass (products over hundreds of steps underflow
in linear domain).  Sums use the running-max shift so that relative accuracy is
~1e-15 independent of scale.
"""

import math

import numpy as np

NEG_INF = float("-inf")


def log_sum_exp(values) -> float:
    """log(sum(exp(values))) with max-shift; empty or all -inf gives -inf."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return NEG_INF
    m = float(np.max(arr))
    if m == NEG_INF:
        return NEG_INF
    return m + math.log(float(np.sum(np.exp(arr - m))))


def log_add(a: float, b: float) -> float:
    """log(e^a + e^b) for two scalars."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def log_mean_exp(values) -> float:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return NEG_INF
    return log_sum_exp(arr) - math.log(arr.size)
