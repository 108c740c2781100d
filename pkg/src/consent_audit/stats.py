"""Bid summaries, control-relative markers, and the Mann-Whitney U test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

ALPHA = 0.05
EXACT_MAX_N = 16


@dataclass(frozen=True)
class BidSummary:
    n: int
    avg: float
    std: float
    persona: Optional[str] = None


def summarize(cpms: Sequence[float], persona: Optional[str] = None, *, ddof: int = 0) -> Optional[BidSummary]:
    """Mean and standard deviation of a CPM sample; None when there are no bids.

    ``ddof=0`` gives the population standard deviation (the default), ``ddof=1``
    the sample one.
    """
    values = [float(x) for x in cpms]
    n = len(values)
    if n == 0:
        return None
    avg = math.fsum(values) / n
    if n - ddof <= 0:
        std = 0.0
    else:
        std = math.sqrt(math.fsum((x - avg) ** 2 for x in values) / (n - ddof))
    return BidSummary(n=n, avg=avg, std=std, persona=persona)


class Marker(str, Enum):
    Up = "Up"
    UpBeyondStd = "UpBeyondStd"
    Down = "Down"
    DownBeyondStd = "DownBeyondStd"

    @property
    def is_up(self) -> bool:
        return self in (Marker.Up, Marker.UpBeyondStd)


def _gt(a: float, b: float) -> bool:
    # Values come from 2-decimal tables as often as from raw data; treat
    # representation noise (0.13 + 0.20 vs 0.33) as equality.
    return a > b and not math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-12)


def classify_marker(avg: float, control_avg: float, control_std: float) -> Marker:
    """Place a persona's mean relative to the control mean and mean +/- std.

    Equality with the control mean classifies as Down; equality with
    ``control_avg + control_std`` stays Up.
    """
    upper = control_avg + control_std
    lower = control_avg - control_std
    if _gt(avg, upper):
        return Marker.UpBeyondStd
    if _gt(avg, control_avg):
        return Marker.Up
    if _gt(lower, avg):
        return Marker.DownBeyondStd
    return Marker.Down


def classify_summary(persona: BidSummary, control: BidSummary) -> Marker:
    return classify_marker(persona.avg, control.avg, control.std)


# --- Mann-Whitney U -----------------------------------------------------------


class Method(str, Enum):
    Exact = "Exact"
    NormalApprox = "NormalApprox"


@dataclass(frozen=True)
class UTestResult:
    u: float
    z: float
    p: float
    method: Method
    n1: int
    n2: int


def midranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = rank
        i = j + 1
    return ranks


def _tie_counts(values: Sequence[float]) -> list[int]:
    counts: dict[float, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return [c for c in counts.values() if c > 1]


def u_distribution(n1: int, n2: int) -> list[int]:
    """Number of label assignments yielding each U = 0..n1*n2 (tie-free null)."""
    # counts[m][k] holds the U-frequency polynomial for m first-sample and k
    # second-sample items; f(m, k) = f(m-1, k) shifted by k + f(m, k-1).
    prev = [[1] for _ in range(n2 + 1)]  # m == 0: only U=0
    for m in range(1, n1 + 1):
        cur = [[1]]  # k == 0
        for k in range(1, n2 + 1):
            a = prev[k]
            b = cur[k - 1]
            size = m * k + 1
            poly = [0] * size
            for u, c in enumerate(a):
                poly[u + k] += c
            for u, c in enumerate(b):
                poly[u] += c
            cur.append(poly)
        prev = cur
    return prev[n2]


def _norm_sf(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2))


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> UTestResult:
    """Two-sided Mann-Whitney U test of ``a`` against ``b``.

    U is the statistic of ``a`` (count of pairs with a > b, ties counting a
    half). Small tie-free samples (n1 + n2 <= 16) get the exact null
    distribution; everything else uses the tie-corrected normal approximation
    with continuity correction. ``z`` is always the tie-corrected,
    continuity-corrected normal deviate, signed positive when ``a`` ranks high.
    """
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    pooled = [float(x) for x in a] + [float(x) for x in b]
    ranks = midranks(pooled)
    r1 = math.fsum(ranks[:n1])
    u = r1 - n1 * (n1 + 1) / 2
    n = n1 + n2
    mu = n1 * n2 / 2
    ties = _tie_counts(pooled)
    tie_term = sum(t ** 3 - t for t in ties)
    var = n1 * n2 / 12 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        return UTestResult(u=u, z=0.0, p=1.0, method=Method.NormalApprox, n1=n1, n2=n2)
    dev = abs(u - mu)
    z = math.copysign(max(dev - 0.5, 0.0), u - mu) / math.sqrt(var)

    if n <= EXACT_MAX_N and not ties:
        dist = u_distribution(n1, n2)
        total = sum(dist)
        k = int(round(u))
        lower = sum(dist[: k + 1])
        upper = sum(dist[k:])
        p = min(1.0, 2 * min(lower, upper) / total)
        return UTestResult(u=u, z=z, p=p, method=Method.Exact, n1=n1, n2=n2)

    p = min(1.0, 2 * _norm_sf(abs(z)))
    return UTestResult(u=u, z=z, p=p, method=Method.NormalApprox, n1=n1, n2=n2)


# --- effect size ------------------------------------------------------------------


class Tier(str, Enum):
    Small = "Small"
    Medium = "Medium"
    Large = "Large"


@dataclass(frozen=True)
class EffectSize:
    r: Optional[float]
    tier: Optional[Tier]
    defined: bool


def effect_tier(r: float) -> Tier:
    if r < 0.3:
        return Tier.Small
    if r <= 0.5:
        return Tier.Medium
    return Tier.Large


def effect_from_values(p: float, r: float, alpha: float = ALPHA) -> EffectSize:
    """Effect size from an already-computed (p, r) pair, e.g. a printed table row."""
    if not p < alpha:
        return EffectSize(r=None, tier=None, defined=False)
    return EffectSize(r=r, tier=effect_tier(r), defined=True)


def effect_size(test: UTestResult, n1: Optional[int] = None, n2: Optional[int] = None, *,
                alpha: float = ALPHA) -> EffectSize:
    """r = |z| / sqrt(n1 + n2), reported only when the test rejects at ``alpha``."""
    n1 = test.n1 if n1 is None else n1
    n2 = test.n2 if n2 is None else n2
    r = abs(test.z) / math.sqrt(n1 + n2)
    return effect_from_values(test.p, r, alpha)


def bonferroni_alpha(alpha: float, comparisons: int) -> float:
    return alpha / max(1, comparisons)
