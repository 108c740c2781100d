import csv
import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consent_audit.audit import (
    Marked,
    MissingControlError,
    Percent,
    advertiser_prevalence,
    advertiser_verdicts,
    assess,
    build_bid_table,
    build_consent_table,
    compare_consent,
    flag_non_compliance,
    prevalence,
    unknown_advertiser_bids,
    verdict_table,
)
from consent_audit.model import CATEGORIES, CONTROL, BidRecord, Consent, Mechanism, Regime
from consent_audit.render import to_csv
from consent_audit.stats import Marker, mann_whitney_u
from consent_audit.sync import Channel, Encoding, IdentifierCandidate, Source, SyncEvent
from consent_audit.model import SessionKey


def bid(persona, cpm, consent=Consent.OptOut, mechanism=Mechanism.OneTrust, regime=Regime.GDPR,
        advertiser="adx.com", iteration=1):
    return BidRecord(persona, "site.com", advertiser, cpm, regime, mechanism, consent, iteration)


def control(values, consent=Consent.OptOut, mechanism=Mechanism.OneTrust, regime=Regime.GDPR):
    return [bid(CONTROL, v, consent, mechanism, regime) for v in values]


def row_of(table, persona):
    return next(r for r in table.rows if r[0] == persona)


def test_bid_table_shape_and_markers():
    ctrl = control([0.01, 0.07])  # mean 0.04, population std 0.03
    bids = ctrl + [bid("Adult", 0.25), bid("Adult", 0.25)]
    table = build_bid_table(bids, Regime.GDPR)
    assert len(table.rows) == 17 and len(table.columns) == 13
    adult = row_of(table, "Adult")
    assert adult[1] == Marked(pytest.approx(0.25), Marker.UpBeyondStd)
    assert adult[3] is None and adult[4] is None  # no opt-in bids
    assert row_of(table, CONTROL)[1].marker is None
    lines = to_csv(table).splitlines()
    assert len(lines) == 18 and len(next(csv.reader(io.StringIO(lines[0])))) == 13


def test_bid_table_missing_control():
    with pytest.raises(MissingControlError):
        build_bid_table([bid("Adult", 0.1)], Regime.GDPR)


def test_all_equal_to_control_is_down():
    bids = control([0.1, 0.1]) + [bid(p, 0.1) for p in CATEGORIES]
    table = build_bid_table(bids, Regime.GDPR)
    assert all(row_of(table, p)[1].marker is Marker.Down for p in CATEGORIES)


def test_compare_consent():
    same = compare_consent([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
    assert same.test.p == 1.0 and not same.effect.defined
    assert compare_consent([], [0.1]).test is None
    shifted = compare_consent([0.1 * k for k in range(1, 31)], [0.2 * k for k in range(1, 31)])
    assert shifted.test.p < 0.05


def test_consent_table_dash_for_one_sided():
    table = build_consent_table([bid("Health", 0.1)])
    health = row_of(table, "Health")
    assert health[1:3] == [None, None]
    assert len(table.rows) == 16


def test_unknown_advertisers_median_summary():
    bids = [bid("Adult", 0.1, advertiser="new.com"), bid("Adult", 0.3, advertiser="new.com"),
            bid("Adult", 5.0, advertiser="known.com"), bid(CONTROL, 0.01, advertiser="other.com")]
    table = unknown_advertiser_bids(bids, {"Adult": frozenset({"known.com"}), CONTROL: frozenset()})
    adult = row_of(table, "Adult")
    assert adult[1].value == pytest.approx(0.2)
    assert adult[2] == 0.0


def test_unknown_advertisers_all_leaked_is_dash():
    bids = [bid("Adult", 0.1, advertiser="known.com"), bid(CONTROL, 0.1, advertiser="c.com")]
    table = unknown_advertiser_bids(bids, {"Adult": frozenset({"known.com"})})
    assert row_of(table, "Adult")[1:3] == [None, None]


def test_unknown_advertiser_control_restriction():
    bids = [bid(CONTROL, 1.0, advertiser="known.com"), bid(CONTROL, 0.1, advertiser="c.com")]
    leaked = {"Adult": frozenset({"known.com"})}
    union = row_of(unknown_advertiser_bids(bids, leaked), CONTROL)[1].value
    none = row_of(unknown_advertiser_bids(bids, leaked, control_restriction="none"), CONTROL)[1].value
    assert union == pytest.approx(0.1) and none == pytest.approx(0.55)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(CATEGORIES[:4]), st.sampled_from(["a.com", "b.com", "c.com"]),
                          st.floats(0, 5)), max_size=30),
       st.sets(st.sampled_from(["a.com", "b.com", "c.com"])))
def test_restriction_never_increases_bid_count(records, leaked_to):
    bids = [bid(p, c, advertiser=a) for p, a, c in records]
    leaked = {p: frozenset(leaked_to) for p in CATEGORIES}
    restricted = [b for b in bids if b.advertiser not in leaked[b.persona]]
    assert len(restricted) <= len(bids)


def cmp_bids(advertiser, personas, regime, mechanism):
    return [bid(p, 0.1, regime=regime, mechanism=mechanism, advertiser=advertiser) for p in personas]


def test_prevalence_examples():
    bids = cmp_bids("appnexus.com", CATEGORIES, Regime.GDPR, Mechanism.OneTrust)
    bids += cmp_bids("appnexus.com", CATEGORIES[:14], Regime.GDPR, Mechanism.CookieBot)
    bids += cmp_bids("pubmatic.com", CATEGORIES, Regime.CCPA, Mechanism.OneTrust)
    bids += cmp_bids("pubmatic.com", CATEGORIES, Regime.CCPA, Mechanism.CookieBot)
    prev = prevalence(bids)
    assert prev["appnexus.com"][Regime.GDPR] == 93.75
    assert prev["pubmatic.com"][Regime.CCPA] == 100.0
    assert prev["pubmatic.com"][Regime.GDPR] == 0.0
    assert all(0 <= v <= 100 for regimes in prev.values() for v in regimes.values())
    table = advertiser_prevalence(bids, top_k=1)
    assert [r[0] for r in table.rows] == ["pubmatic.com"]
    assert table.rows[0][2] == Percent(100.0, 2)


def test_prevalence_exclude_absent():
    bids = cmp_bids("a.com", CATEGORIES[:8], Regime.GDPR, Mechanism.OneTrust)
    assert prevalence(bids)["a.com"][Regime.GDPR] == 25.0
    assert prevalence(bids, exclude_absent=True)["a.com"][Regime.GDPR] == 50.0


def test_flag_rule():
    up_same = mann_whitney_u([0.3] * 10 + [0.31], [0.3] * 10 + [0.29])
    assert flag_non_compliance(Marker.UpBeyondStd, up_same)
    assert not flag_non_compliance(Marker.Down, up_same)
    effective = mann_whitney_u([0.1 + k / 100 for k in range(20)], [1 + k / 100 for k in range(20)])
    assert not flag_non_compliance(Marker.Up, effective)
    assert not flag_non_compliance(None, up_same)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 1), min_size=3, max_size=15), st.lists(st.floats(0.01, 1), min_size=3, max_size=15),
       st.lists(st.floats(0.01, 1), min_size=3, max_size=15), st.floats(0, 3))
def test_flag_is_monotone_in_opt_out_bids(opt_out, opt_in, ctrl, raise_by):
    def flagged(out_values):
        bids = [bid("Adult", v) for v in out_values] + [bid("Adult", v, Consent.OptIn) for v in opt_in]
        bids += control(ctrl) + control(ctrl, Consent.OptIn)
        (verdict,) = assess(bids)
        return verdict.non_compliant

    if flagged(opt_out):
        assert flagged([v + raise_by for v in opt_out])


def test_assess_one_verdict_per_cell():
    bids = control([0.1, 0.2]) + control([0.1, 0.2], Consent.OptIn)
    bids += [bid("Adult", 0.5), bid("Adult", 0.6), bid("Adult", 0.5, Consent.OptIn)]
    (v,) = assess(bids)
    assert (v.persona, v.opt_out_marker) == ("Adult", Marker.UpBeyondStd)
    assert v.non_compliant
    assert v.as_dict()["u_test"]["method"] == "NormalApprox"  # tied 0.5s


def test_verdict_table_empty_is_header_only():
    assert to_csv(verdict_table([])).count("\n") == 1


def test_advertiser_verdicts_quorum_and_syncs():
    bids = []
    for consent in Consent:
        bids += [bid(CONTROL, 0.1 + k / 1000, consent, advertiser="x.com") for k in range(10)]
        bids += [bid("Adult", 0.5 + k / 1000, consent, advertiser="x.com") for k in range(10)]
        bids += [bid(CONTROL, 0.1 + k / 1000, consent, advertiser="y.com") for k in range(10)]
        bids += [bid("Adult", 0.1 + k / 1000, consent, advertiser="y.com") for k in range(10)]
    leaked = {"Adult": frozenset({"x.com", "y.com"})}
    ident = IdentifierCandidate("y.com", "uid", "Qw3rTy9Zx1", Source.CookieSet)
    session = SessionKey("Adult", Regime.GDPR, Mechanism.OneTrust, Consent.OptOut, 1)
    sync = SyncEvent("y.com", "z.com", ident, Encoding.Plain, Channel.UrlComponent, "e1", session)
    verdicts = {v.advertiser: v for v in advertiser_verdicts(bids, leaked)}
    assert verdicts["x.com"].flagged and not verdicts["y.com"].flagged
    verdicts = {v.advertiser: v for v in advertiser_verdicts(bids, leaked, [sync])}
    assert verdicts["y.com"].flagged and verdicts["y.com"].opt_out_syncs == 1
