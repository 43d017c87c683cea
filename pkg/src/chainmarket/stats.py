"""Rank statistics for latency analysis.

The pipeline bins a blockchain feature (gas price, block size, transaction
count) into population quintiles, then asks whether latency distributions
differ across bins: a tie-corrected Kruskal-Wallis omnibus test, Dunn's
pairwise post-hoc z tests with Bonferroni adjustment, and Cliff's delta effect
sizes computed by exact pair counting. No parametric assumptions anywhere;
everything is a pure function of its inputs.
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

import numpy as np


class StatsError(Exception):
    pass


class EmptyGroup(StatsError):
    pass


class TooFewValues(StatsError):
    pass


class TooFewRecords(StatsError):
    pass


class DegenerateBinning(StatsError):
    pass


QUINTILE_LABELS = ("Q1", "Q2", "Q3", "Q4", "Q5")

# Effect-size magnitude thresholds on |delta|.
_NEGLIGIBLE = Fraction(147, 1000)
_SMALL = Fraction(33, 100)
_MEDIUM = Fraction(474, 1000)


# ---------------------------------------------------------------------------
# Numeric tails
# ---------------------------------------------------------------------------

def _reg_upper_gamma(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) for a > 0, x >= 0.

    Series expansion below x < a + 1, Lentz continued fraction above; both
    converge to near machine precision in the df <= 50, x <= 500 regime the
    chi-square tail needs.
    """
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0.0:
        return 1.0
    log_prefactor = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        # P(a, x) by series; Q = 1 - P.
        term = 1.0 / a
        total = term
        n = 1
        while True:
            term *= x / (a + n)
            total += term
            if abs(term) < abs(total) * 1e-16 or n > 10_000:
                break
            n += 1
        return 1.0 - total * math.exp(log_prefactor)
    # Q(a, x) by modified Lentz continued fraction.
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(log_prefactor) * h


def chi2_upper_tail(x: float, df: int) -> float:
    """Upper-tail probability of the chi-square distribution."""
    if not math.isfinite(x):
        raise ValueError("x must be finite")
    if df < 1:
        raise ValueError("df must be a positive integer")
    if x <= 0:
        return 1.0
    return min(1.0, max(0.0, _reg_upper_gamma(df / 2.0, x / 2.0)))


def normal_two_sided_p(z: float) -> float:
    """Two-sided standard normal tail 2 * (1 - Phi(|z|))."""
    if not math.isfinite(z):
        raise ValueError("z must be finite")
    return math.erfc(abs(z) / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# Ranks
# ---------------------------------------------------------------------------

def _midranks(pooled: list[float]) -> list[float]:
    """Average ranks (1-based) with ties sharing their mid-rank."""
    order = sorted(range(len(pooled)), key=lambda i: pooled[i])
    ranks = [0.0] * len(pooled)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and pooled[order[j + 1]] == pooled[order[i]]:
            j += 1
        mid = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mid
        i = j + 1
    return ranks


def _tie_term(pooled: list[float]) -> float:
    """Sum of t^3 - t over tie groups."""
    counts: dict[float, int] = {}
    for v in pooled:
        counts[v] = counts.get(v, 0) + 1
    return float(sum(t**3 - t for t in counts.values() if t > 1))


# ---------------------------------------------------------------------------
# Kruskal-Wallis
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class KWResult:
    h_statistic: float
    df: int
    p_value: float
    tie_correction: float


def kruskal_wallis(groups: list[list[float]]) -> KWResult:
    """Tie-corrected Kruskal-Wallis H over two or more groups."""
    if len(groups) < 2:
        raise EmptyGroup("need at least two groups")
    if any(len(g) == 0 for g in groups):
        raise EmptyGroup("all groups must be non-empty")
    pooled = [float(v) for g in groups for v in g]
    n_total = len(pooled)
    if n_total < 3:
        raise EmptyGroup("need at least three observations in total")

    df = len(groups) - 1
    correction = 1.0 - _tie_term(pooled) / (n_total**3 - n_total)
    if correction <= 0.0:
        # Every pooled value identical: no evidence against the null.
        return KWResult(h_statistic=0.0, df=df, p_value=1.0, tie_correction=1.0)

    ranks = _midranks(pooled)
    h = 0.0
    start = 0
    for g in groups:
        r_sum = sum(ranks[start : start + len(g)])
        h += r_sum * r_sum / len(g)
        start += len(g)
    h = 12.0 / (n_total * (n_total + 1)) * h - 3.0 * (n_total + 1)
    h /= correction
    h = max(h, 0.0)
    return KWResult(
        h_statistic=h,
        df=df,
        p_value=chi2_upper_tail(h, df),
        tie_correction=correction,
    )


# ---------------------------------------------------------------------------
# Dunn's post-hoc
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class DunnResult:
    pair: tuple[str, str]
    z: float
    p_raw: float
    p_adjusted: float
    significant: bool


def dunn_posthoc(
    groups: list[list[float]],
    alpha: float = 0.05,
    labels: tuple[str, ...] | None = None,
) -> list[DunnResult]:
    """Pairwise mean-rank z tests after Kruskal-Wallis, Bonferroni adjusted."""
    if len(groups) < 2:
        raise EmptyGroup("need at least two groups")
    if any(len(g) == 0 for g in groups):
        raise EmptyGroup("all groups must be non-empty")
    if labels is None:
        labels = tuple(f"Q{i + 1}" for i in range(len(groups)))

    pooled = [float(v) for g in groups for v in g]
    n_total = len(pooled)
    ranks = _midranks(pooled)
    mean_ranks = []
    start = 0
    for g in groups:
        mean_ranks.append(sum(ranks[start : start + len(g)]) / len(g))
        start += len(g)

    tie_term = _tie_term(pooled)
    variance_core = n_total * (n_total + 1) / 12.0
    if n_total > 1:
        variance_core -= tie_term / (12.0 * (n_total - 1))

    m = len(groups) * (len(groups) - 1) // 2
    results = []
    for i, j in combinations(range(len(groups)), 2):
        var = variance_core * (1.0 / len(groups[i]) + 1.0 / len(groups[j]))
        if var <= 0.0:
            z = 0.0
        else:
            z = (mean_ranks[i] - mean_ranks[j]) / math.sqrt(var)
        p_raw = normal_two_sided_p(z)
        p_adj = min(1.0, m * p_raw)
        results.append(
            DunnResult(
                pair=(labels[i], labels[j]),
                z=z,
                p_raw=p_raw,
                p_adjusted=p_adj,
                significant=p_adj < alpha,
            )
        )
    return results


# ---------------------------------------------------------------------------
# Cliff's delta
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class CliffsDelta:
    delta: float
    magnitude: str


def _magnitude(delta_exact: Fraction) -> str:
    mag = abs(delta_exact)
    if mag <= _NEGLIGIBLE:
        return "negligible"
    if mag <= _SMALL:
        return "small"
    if mag <= _MEDIUM:
        return "medium"
    return "large"


def cliffs_delta(a: list[float], b: list[float]) -> CliffsDelta:
    """Exact Cliff's delta: (#{x > y} - #{x < y}) / (|a| * |b|).

    Counted via binary search over a sorted copy of b, so the value (and the
    magnitude label at its published thresholds) is exact, never approximated.
    """
    if not a or not b:
        raise EmptyGroup("both groups must be non-empty")
    sorted_b = sorted(float(v) for v in b)
    greater = 0
    less = 0
    for x in a:
        x = float(x)
        greater += bisect_left(sorted_b, x)
        less += len(sorted_b) - bisect_right(sorted_b, x)
    exact = Fraction(greater - less, len(a) * len(b))
    return CliffsDelta(delta=float(exact), magnitude=_magnitude(exact))


# ---------------------------------------------------------------------------
# Quintile binning
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class QuintileBinning:
    feature: str
    breakpoints: tuple[float, float, float, float]
    labels: tuple[str, ...]  # one per input value, aligned
    degenerate: bool


def assign_quintiles(values: list[float], feature: str = "value") -> QuintileBinning:
    """Bin values by their empirical 20/40/60/80th percentiles.

    Boundary values fall into the lower quintile; with heavy ties several
    breakpoints may coincide, in which case the binning is flagged degenerate.
    """
    if len(values) < 5:
        raise TooFewValues(f"need at least 5 values, got {len(values)}")
    arr = np.asarray(values, dtype=float)
    breakpoints = tuple(float(b) for b in np.percentile(arr, [20, 40, 60, 80]))

    labels = []
    for v in values:
        v = float(v)
        if v <= breakpoints[0]:
            labels.append("Q1")
        elif v <= breakpoints[1]:
            labels.append("Q2")
        elif v <= breakpoints[2]:
            labels.append("Q3")
        elif v <= breakpoints[3]:
            labels.append("Q4")
        else:
            labels.append("Q5")
    degenerate = len(set(labels)) < 2
    return QuintileBinning(
        feature=feature,
        breakpoints=breakpoints,  # type: ignore[arg-type]
        labels=tuple(labels),
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# Box summaries and the full per-feature report
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class BoxSummary:
    n: int
    mean: float
    median: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    outliers: tuple[float, ...]


def box_summary(values: list[float]) -> BoxSummary:
    """Five-number box summary with 1.5 IQR whiskers clipped to the data."""
    if not values:
        raise EmptyGroup("cannot summarise an empty group")
    arr = np.asarray(values, dtype=float)
    q1, median, q3 = (float(q) for q in np.percentile(arr, [25, 50, 75]))
    iqr = q3 - q1
    lo_fence = q1 - 1.5 * iqr
    hi_fence = q3 + 1.5 * iqr
    inside = arr[(arr >= lo_fence) & (arr <= hi_fence)]
    whisker_lo = float(inside.min()) if inside.size else q1
    whisker_hi = float(inside.max()) if inside.size else q3
    outliers = tuple(float(v) for v in sorted(arr[(arr < lo_fence) | (arr > hi_fence)]))
    return BoxSummary(
        n=int(arr.size),
        mean=float(arr.mean()),
        median=median,
        q1=q1,
        q3=q3,
        whisker_lo=whisker_lo,
        whisker_hi=whisker_hi,
        outliers=outliers,
    )


@dataclass(frozen=True, slots=True)
class QuintileReport:
    feature: str
    binning: QuintileBinning
    group_sizes: tuple[int, ...]
    boxes: tuple[BoxSummary, ...]
    kw: KWResult
    comparisons: tuple[tuple[DunnResult, CliffsDelta], ...]


def build_report(records: list, feature: str, alpha: float = 0.05) -> QuintileReport:
    """Quintile-bin one feature of the records and test latency across bins.

    `records` only need `latency_s` and the named feature attribute. All ten
    unordered quintile pairs are compared; empty quintiles abort the analysis
    rather than producing a partial table.
    """
    if len(records) < 25:
        raise TooFewRecords(f"need at least 25 records, got {len(records)}")
    feature_values = [float(getattr(r, feature)) for r in records]
    latencies = [float(r.latency_s) for r in records]

    binning = assign_quintiles(feature_values, feature=feature)
    groups: dict[str, list[float]] = {label: [] for label in QUINTILE_LABELS}
    for label, latency in zip(binning.labels, latencies):
        groups[label].append(latency)
    if any(len(groups[label]) == 0 for label in QUINTILE_LABELS):
        sizes = {label: len(groups[label]) for label in QUINTILE_LABELS}
        raise DegenerateBinning(f"empty quintile for {feature}: {sizes}")

    ordered = [groups[label] for label in QUINTILE_LABELS]
    kw = kruskal_wallis(ordered)
    dunn = dunn_posthoc(ordered, alpha=alpha, labels=QUINTILE_LABELS)
    comparisons = []
    for result in dunn:
        i = QUINTILE_LABELS.index(result.pair[0])
        j = QUINTILE_LABELS.index(result.pair[1])
        comparisons.append((result, cliffs_delta(ordered[i], ordered[j])))

    return QuintileReport(
        feature=feature,
        binning=binning,
        group_sizes=tuple(len(g) for g in ordered),
        boxes=tuple(box_summary(g) for g in ordered),
        kw=kw,
        comparisons=tuple(comparisons),
    )
