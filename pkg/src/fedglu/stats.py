"""Paired t-test, Spearman correlation and profile binning for cohort comparisons."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DegenerateVariance(ValueError):
    pass


class TooFewPatients(ValueError):
    pass


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class StatResult:
    statistic: float
    p_value: float
    df: int


def paired_t_test(deltas: Sequence[float]) -> StatResult:
    """One-sample t-test of paired differences against zero."""
    d = np.asarray(deltas, dtype=np.float64)
    n = d.size
    if n < 2:
        raise DegenerateVariance("paired t-test needs at least two differences")
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateVariance("all differences are equal")
    t = float(np.mean(d)) * math.sqrt(n) / sd
    return StatResult(t, t_two_sided_p(t, n - 1), n - 1)


def rankdata(x) -> np.ndarray:
    """1-based ranks, ties receiving the average of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> StatResult:
    """Spearman rank correlation; p-value from the t approximation with n-2 df."""
    rx, ry = rankdata(x), rankdata(y)
    n = rx.size
    if n != ry.size:
        raise ValueError("x and y must have equal length")
    if n < 3:
        raise DegenerateVariance("spearman_rho needs at least three points")
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        raise DegenerateVariance("one input is constant")
    rho = float(dx @ dy) / denom
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        return StatResult(rho, 0.0, n - 2)
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return StatResult(rho, t_two_sided_p(t, n - 2), n - 2)


@dataclass
class ProfileBin:
    lo: float
    hi: float
    patients: list
    mean_improvement: float
    var_improvement: float


@dataclass
class ProfileBins:
    region: str
    assignment: dict
    bins: list


def profile_bins(profile_pct: dict, improvement: dict, region: str = "hypo", n_bins: int = 10) -> ProfileBins:
    """Equal-count binning of patients by their excursion percentage.

    Patients are ordered by (percentage, patient id) and split into ``n_bins``
    contiguous groups whose sizes differ by at most one. Each bin reports the
    mean and population variance of the per-patient RMSE improvement.
    """
    if region not in ("hypo", "hyper"):
        raise ValueError("region must be 'hypo' or 'hyper'")
    pids = sorted(profile_pct, key=lambda p: (profile_pct[p], p))
    if len(pids) < n_bins:
        raise TooFewPatients(f"{len(pids)} patients cannot fill {n_bins} bins")
    assignment, bins = {}, []
    for b, chunk in enumerate(np.array_split(np.arange(len(pids)), n_bins)):
        members = [pids[i] for i in chunk]
        imp = np.array([improvement[p] for p in members], dtype=np.float64)
        for p in members:
            assignment[p] = b
        bins.append(ProfileBin(float(profile_pct[members[0]]), float(profile_pct[members[-1]]),
                               members, float(imp.mean()), float(imp.var())))
    return ProfileBins(region, assignment, bins)
