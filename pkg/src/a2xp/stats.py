"""One-way repeated-measures ANOVA with a self-contained F tail probability."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

_BETACF_EPS = 1e-16
_BETACF_TINY = 1e-300
_BETACF_MAXITER = 10_000


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction of the regularized incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETACF_TINY:
        d = _BETACF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAXITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_TINY:
            d = _BETACF_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETACF_TINY:
            c = _BETACF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_TINY:
            d = _BETACF_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETACF_TINY:
            c = _BETACF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)`` for ``a, b > 0`` and ``0 <= x <= 1``."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc_reg needs a > 0 and b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError("betainc_reg needs 0 <= x <= 1")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast only below the mean; use symmetry above it
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_sf(f: float, df1: float, df2: float) -> float:
    """Upper tail ``P(F > f)`` of the F distribution."""
    if df1 <= 0 or df2 <= 0:
        raise ValueError("degrees of freedom must be positive")
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return betainc_reg(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))


@dataclass(frozen=True)
class RMAnovaResult:
    f_stat: float
    df_conditions: int
    df_error: int
    p_value: float
    degenerate: bool = False
    ss_conditions: float = 0.0
    ss_subjects: float = 0.0
    ss_error: float = 0.0


def rm_anova(table) -> RMAnovaResult:
    """Repeated-measures ANOVA on an ``S x N`` table (subjects x conditions).

    The subject effect is removed from the error term, so
    ``F = MS_conditions / MS_error`` with ``(N - 1, (N - 1)(S - 1))``
    degrees of freedom.  If the error sum of squares vanishes the result
    is flagged ``degenerate`` and ``p`` is 0 when condition means differ,
    1 otherwise.
    """
    y = np.asarray(table, dtype=np.float64)
    if y.ndim != 2:
        raise ConfigurationError(f"rm_anova expects a 2-D table, got shape {y.shape}")
    s, n = y.shape
    if s < 2 or n < 2:
        raise ConfigurationError(f"rm_anova needs at least 2 subjects and 2 conditions, got {s}x{n}")
    if not np.all(np.isfinite(y)):
        raise ConfigurationError("rm_anova table has missing or non-finite cells")

    grand = y.mean()
    ss_cond = s * float(np.sum((y.mean(axis=0) - grand) ** 2))
    ss_subj = n * float(np.sum((y.mean(axis=1) - grand) ** 2))
    resid = y - y.mean(axis=0, keepdims=True) - y.mean(axis=1, keepdims=True) + grand
    ss_err = float(np.sum(resid ** 2))
    df1, df2 = n - 1, (n - 1) * (s - 1)

    # tolerance relative to the data's own scale
    scale = float(np.sum((y - grand) ** 2)) + float(np.sum(y ** 2)) * 1e-16
    tol = 1e-24 + 1e-12 * scale
    if ss_err <= tol:
        differ = ss_cond > tol
        return RMAnovaResult(math.inf if differ else math.nan, df1, df2, 0.0 if differ else 1.0,
                             True, ss_cond, ss_subj, ss_err)
    f = (ss_cond / df1) / (ss_err / df2)
    return RMAnovaResult(f, df1, df2, f_sf(f, df1, df2), False, ss_cond, ss_subj, ss_err)
