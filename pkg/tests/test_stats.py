import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from consent_audit.stats import (
    BidSummary,
    Marker,
    Method,
    Tier,
    bonferroni_alpha,
    classify_marker,
    effect_from_values,
    effect_size,
    effect_tier,
    mann_whitney_u,
    midranks,
    summarize,
    u_distribution,
)


def test_summarize_examples():
    assert summarize([1.0, 1.0, 1.0]) == BidSummary(3, 1.0, 0.0)
    s = summarize([0.0, 0.5])
    assert (s.avg, s.std) == (0.25, 0.25)
    assert summarize([]) is None


def test_summarize_sample_std():
    assert summarize([0.0, 0.5], ddof=1).std == pytest.approx(np.std([0.0, 0.5], ddof=1))


@pytest.mark.parametrize("avg,expected", [
    (0.25, Marker.UpBeyondStd),
    (0.09, Marker.Up),
    (0.04, Marker.Down),
    (0.15, Marker.Up),  # equal to mean + std stays Up
    (0.01, Marker.Down),
])
def test_marker_examples(avg, expected):
    assert classify_marker(avg, 0.04, 0.11) is expected


def test_marker_down_beyond_std():
    assert classify_marker(0.01, 0.5, 0.1) is Marker.DownBeyondStd
    assert classify_marker(0.4, 0.5, 0.1) is Marker.Down  # on the lower band edge


def test_marker_float_noise_is_equality():
    assert classify_marker(0.33, 0.13, 0.20) is Marker.Up


def test_midranks():
    assert midranks([3, 1, 3, 2]) == [3.5, 1.0, 3.5, 2.0]


def test_u_distribution_counts():
    dist = u_distribution(3, 3)
    assert sum(dist) == math.comb(6, 3)
    assert dist == dist[::-1]


def test_examples():
    res = mann_whitney_u([1, 2, 3], [4, 5, 6])
    assert res.u == 0
    assert res.method is Method.Exact
    assert res.p == pytest.approx(0.1, abs=1e-15)
    same = mann_whitney_u([1, 1, 1], [1, 1, 1])
    assert (same.z, same.p) == (0.0, 1.0)


def test_empty_sample_raises():
    with pytest.raises(ValueError):
        mann_whitney_u([], [1.0])


def brute_force_p(a, b):
    pooled = list(a) + list(b)
    ranks = midranks(pooled)
    n1 = len(a)
    u_obs = sum(ranks[:n1]) - n1 * (n1 + 1) / 2
    us = [sum(ranks[i] for i in c) - n1 * (n1 + 1) / 2 for c in itertools.combinations(range(len(pooled)), n1)]
    lo = sum(u <= u_obs + 1e-9 for u in us)
    hi = sum(u >= u_obs - 1e-9 for u in us)
    return min(1.0, 2 * min(lo, hi) / len(us))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=11, unique=True), st.data())
def test_exact_matches_enumeration(values, data):
    k = data.draw(st.integers(1, len(values) - 1))
    a, b = values[:k], values[k:]
    res = mann_whitney_u(a, b)
    assert res.method is Method.Exact
    assert res.p == pytest.approx(brute_force_p(a, b), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_against_scipy(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=7).tolist(), rng.normal(0.5, size=8).tolist()
    ours = mann_whitney_u(a, b)
    ref = sps.mannwhitneyu(a, b, alternative="two-sided", method="exact")
    assert ours.u == ref.statistic
    assert ours.p == pytest.approx(ref.pvalue, rel=1e-9)

    a, b = np.round(rng.lognormal(size=30), 1).tolist(), np.round(rng.lognormal(size=25), 1).tolist()
    ours = mann_whitney_u(a, b)
    ref = sps.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    assert ours.method is Method.NormalApprox
    assert ours.u == ref.statistic
    assert ours.p == pytest.approx(ref.pvalue, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=1, max_size=15), st.lists(st.integers(0, 20), min_size=1, max_size=15))
def test_u_symmetry_and_range(a, b):
    ab, ba = mann_whitney_u(a, b), mann_whitney_u(b, a)
    assert ab.u + ba.u == len(a) * len(b)
    assert ab.p == pytest.approx(ba.p)
    assert 0 <= ab.p <= 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-500, 500), min_size=1, max_size=12), st.lists(st.integers(-500, 500), min_size=1, max_size=12))
def test_monotone_transform_invariance(a, b):
    plain = mann_whitney_u(a, b)
    cubed = mann_whitney_u([x ** 3 + 7 for x in a], [x ** 3 + 7 for x in b])
    assert plain.u == cubed.u
    assert plain.p == pytest.approx(cubed.p)


def test_z_sign_follows_first_sample():
    assert mann_whitney_u([10, 11, 12, 13] * 5, [1, 2, 3, 4] * 5).z > 0
    assert mann_whitney_u([1, 2, 3, 4] * 5, [10, 11, 12, 13] * 5).z < 0


@pytest.mark.parametrize("r,tier", [(0.0, Tier.Small), (0.299, Tier.Small), (0.3, Tier.Medium),
                                    (0.5, Tier.Medium), (0.5001, Tier.Large), (0.6, Tier.Large)])
def test_tier_boundaries(r, tier):
    assert effect_tier(r) is tier


def test_effect_examples():
    assert effect_from_values(0.00, 0.53).tier is Tier.Large
    undefined = effect_from_values(0.13, 0.2)
    assert not undefined.defined and undefined.tier is None
    assert effect_from_values(0.04, 0.12).tier is Tier.Small
    assert not effect_from_values(0.05, 0.12).defined


def test_effect_size_from_test():
    res = mann_whitney_u(list(range(20)), list(range(15, 40)))
    eff = effect_size(res)
    assert eff.defined
    assert eff.r == pytest.approx(abs(res.z) / math.sqrt(45))
    tight = effect_size(res, alpha=bonferroni_alpha(0.05, 10 ** 9))
    assert not tight.defined


def test_bonferroni():
    assert bonferroni_alpha(0.05, 10) == pytest.approx(0.005)
    assert bonferroni_alpha(0.05, 0) == 0.05
