"""Rank-based tests: Kruskal-Wallis with tie correction, Dunn's pairwise
test, Bonferroni adjustment, and the chi-squared survival function."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence


class NotApplicableError(ValueError):
    """The test is undefined for this data (e.g. every observation identical)."""


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    statistic: float
    degrees_of_freedom: int
    p_value: float


@dataclass(frozen=True)
class PairwiseResult:
    pair: tuple[str, str]
    z: float
    p_raw: float
    p_adj: float


Groups = Sequence[tuple[str, Sequence[float]]]


# -- special functions --------------------------------------------------------

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


def _lower_gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by power series (x < a + 1)."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _upper_gamma_cf(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) by modified Lentz continued fraction (x >= a + 1)."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def regularized_upper_gamma(a: float, x: float) -> float:
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _lower_gamma_series(a, x))
    return min(1.0, _upper_gamma_cf(a, x))


def chi_squared_sf(x: float, df: int) -> float:
    """P(X > x) for X ~ chi-squared(df)."""
    if df < 1:
        raise ValueError("df must be >= 1")
    if x <= 0:
        return 1.0
    return regularized_upper_gamma(df / 2.0, x / 2.0)


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# -- ranks --------------------------------------------------------------------


def midranks(values: Sequence[float]) -> list[float]:
    """1-based ranks with ties sharing the mean of the ranks they span."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mean_rank = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def tie_sizes(values: Sequence[float]) -> list[int]:
    counts: dict[float, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return [t for t in counts.values() if t > 1]


def _validate(samples: Groups) -> tuple[list[str], list[list[float]]]:
    labels = [label for label, _ in samples]
    groups = [[float(x) for x in obs] for _, obs in samples]
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    if any(not g for g in groups):
        raise ValueError("every group must be nonempty")
    if any(not math.isfinite(x) for g in groups for x in g):
        raise ValueError("observations must be finite")
    if len(set(labels)) != len(labels):
        raise ValueError("group labels must be unique")
    total = sum(len(g) for g in groups)
    if total < 3:
        raise ValueError("need at least three observations in total")
    pooled = [x for g in groups for x in g]
    if len(set(pooled)) == 1:
        raise NotApplicableError("all observations are identical; rank tests are not applicable")
    return labels, groups


def _ranked(groups: list[list[float]]) -> tuple[list[list[float]], int, float]:
    pooled = [x for g in groups for x in g]
    ranks = midranks(pooled)
    out = []
    pos = 0
    for g in groups:
        out.append(ranks[pos : pos + len(g)])
        pos += len(g)
    n = len(pooled)
    tie_term = sum(t**3 - t for t in tie_sizes(pooled))
    return out, n, tie_term


def kruskal_wallis(samples: Groups) -> TestResult:
    """Kruskal-Wallis H with tie correction; p from chi-squared with g - 1 df."""
    _, groups = _validate(samples)
    ranked, n, tie_term = _ranked(groups)
    h = 12.0 / (n * (n + 1)) * math.fsum(sum(r) ** 2 / len(r) for r in ranked) - 3.0 * (n + 1)
    correction = 1.0 - tie_term / (n**3 - n)
    h = max(0.0, h / correction)
    df = len(groups) - 1
    return TestResult(statistic=h, degrees_of_freedom=df, p_value=chi_squared_sf(h, df))


def bonferroni(p_values: Sequence[float], m: int) -> list[float]:
    if m < len(p_values):
        raise ValueError("m must be at least the number of comparisons")
    for p in p_values:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p-value {p} outside [0, 1]")
    return [min(1.0, p * m) for p in p_values]


def dunn_test(samples: Groups) -> list[PairwiseResult]:
    """Dunn's test on mean ranks, tie-corrected variance, two-sided, Bonferroni-adjusted.

    ``z`` is signed: positive when the first group of the pair has the higher mean rank.
    """
    labels, groups = _validate(samples)
    ranked, n, tie_term = _ranked(groups)
    mean_ranks = [sum(r) / len(r) for r in ranked]
    variance_unit = n * (n + 1) / 12.0 - tie_term / (12.0 * (n - 1))
    pairs = list(combinations(range(len(groups)), 2))
    zs, raw = [], []
    for i, j in pairs:
        se = math.sqrt(variance_unit * (1.0 / len(groups[i]) + 1.0 / len(groups[j])))
        z = (mean_ranks[i] - mean_ranks[j]) / se
        zs.append(z)
        raw.append(min(1.0, 2.0 * normal_sf(abs(z))))
    adjusted = bonferroni(raw, len(pairs))
    return [
        PairwiseResult(pair=(labels[i], labels[j]), z=z, p_raw=p, p_adj=pa)
        for (i, j), z, p, pa in zip(pairs, zs, raw, adjusted)
    ]


def stats_report(samples: Groups) -> dict:
    """Omnibus plus pairwise results as a JSON-ready dict; degenerate data is reported, not raised."""
    try:
        omnibus = kruskal_wallis(samples)
        pairwise = dunn_test(samples)
    except NotApplicableError as exc:
        return {"test": "kruskal-wallis", "applicable": False, "reason": str(exc)}
    return {
        "test": "kruskal-wallis",
        "applicable": True,
        "statistic": omnibus.statistic,
        "df": omnibus.degrees_of_freedom,
        "p": omnibus.p_value,
        "pairwise": [
            {"pair": list(r.pair), "z": r.z, "p_raw": r.p_raw, "p_adj": r.p_adj} for r in pairwise
        ],
        "notes": {"ties": "midranks; tie-corrected H and Dunn variance", "sided": "two-sided", "adjust": "bonferroni"},
    }
