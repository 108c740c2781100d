"""Verdicts and report tables built from parsed bid (and optionally sync) data."""

from __future__ import annotations

import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .model import CATEGORIES, CONTROL, PERSONAS, BidRecord, Consent, Mechanism, Regime
from .stats import (
    ALPHA,
    BidSummary,
    EffectSize,
    Marker,
    UTestResult,
    bonferroni_alpha,
    classify_summary,
    effect_size,
    mann_whitney_u,
    summarize,
)
from .sync import SyncEvent

CMP_MECHANISMS = (Mechanism.OneTrust, Mechanism.CookieBot)
PREVALENCE_DENOMINATOR = len(CATEGORIES)

LeakedSet = Mapping[str, frozenset]


class MissingControlError(ValueError):
    pass


@dataclass(frozen=True)
class Marked:
    """A numeric table cell with an optional marker."""

    value: Optional[float]
    marker: Optional[Marker] = None


@dataclass(frozen=True)
class Percent:
    value: Optional[float]
    decimals: int = 1


@dataclass
class Table:
    name: str
    title: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)


# --- grouping helpers -----------------------------------------------------------------

Cell = tuple[Regime, Mechanism, Consent, str]


def group_cpms(bids: Iterable[BidRecord]) -> dict[Cell, list[float]]:
    out: dict[Cell, list[float]] = defaultdict(list)
    for b in bids:
        out[(b.regime, b.mechanism, b.consent, b.persona)].append(b.cpm)
    return out


def _configs(groups) -> list[tuple[Regime, Mechanism, Consent]]:
    return sorted({(r, m, c) for r, m, c, _ in groups})


def _require_control(groups, regime, mechanism, consent):
    if any(groups.get((regime, mechanism, consent, p)) for p in CATEGORIES) and not groups.get(
        (regime, mechanism, consent, CONTROL)
    ):
        raise MissingControlError(
            f"no control-persona bids for {regime.value}/{mechanism.value}/{consent.value}; markers undefined"
        )


# --- verdicts ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditVerdict:
    regime: Regime
    mechanism: Mechanism
    persona: str
    opt_out: Optional[BidSummary]
    opt_out_marker: Optional[Marker]
    opt_in: Optional[BidSummary]
    opt_in_marker: Optional[Marker]
    test: Optional[UTestResult]
    effect: Optional[EffectSize]
    non_compliant: bool

    def as_dict(self) -> dict:
        def summ(s):
            return None if s is None else {"n": s.n, "avg": s.avg, "std": s.std}

        return {
            "regime": self.regime.value,
            "mechanism": self.mechanism.value,
            "persona": self.persona,
            "non_compliant": self.non_compliant,
            "opt_out": summ(self.opt_out),
            "opt_out_marker": None if self.opt_out_marker is None else self.opt_out_marker.value,
            "opt_in": summ(self.opt_in),
            "opt_in_marker": None if self.opt_in_marker is None else self.opt_in_marker.value,
            "u_test": None if self.test is None else {
                "u": self.test.u, "z": self.test.z, "p": self.test.p, "method": self.test.method.value,
            },
            "effect": None if self.effect is None or not self.effect.defined else {
                "r": self.effect.r, "tier": self.effect.tier.value,
            },
        }


def consent_effective(test: Optional[UTestResult], alpha: float = ALPHA) -> bool:
    """True when opt-out bids rank significantly *below* opt-in bids.

    The test is run with opt-out as the first sample, so a negative z means
    opt-out ranks low.
    """
    return test is not None and test.p < alpha and test.z < 0


def flag_non_compliance(opt_out_marker: Optional[Marker], test: Optional[UTestResult], alpha: float = ALPHA) -> bool:
    """Targeting persists under opt-out and consent made no measurable downward difference."""
    if opt_out_marker is None or test is None:
        return False
    return opt_out_marker.is_up and not consent_effective(test, alpha)


def _verdict(regime, mechanism, persona, out_cpms, in_cpms, ctrl_out, ctrl_in, alpha) -> AuditVerdict:
    s_out = summarize(out_cpms, persona)
    s_in = summarize(in_cpms, persona)
    c_out = summarize(ctrl_out, CONTROL)
    c_in = summarize(ctrl_in, CONTROL)
    m_out = classify_summary(s_out, c_out) if s_out and c_out else None
    m_in = classify_summary(s_in, c_in) if s_in and c_in else None
    test = mann_whitney_u(out_cpms, in_cpms) if out_cpms and in_cpms else None
    eff = effect_size(test, alpha=alpha) if test is not None else None
    return AuditVerdict(
        regime, mechanism, persona, s_out, m_out, s_in, m_in, test, eff,
        flag_non_compliance(m_out, test, alpha),
    )


def assess(bids: Iterable[BidRecord], *, alpha: float = ALPHA, bonferroni: bool = False) -> list[AuditVerdict]:
    """One verdict per (regime, mechanism, persona) that has any bids."""
    groups = group_cpms(bids)
    pairs = sorted({(r, m) for r, m, _, _ in groups})
    tests = sum(1 for r, m in pairs for p in CATEGORIES
                if groups.get((r, m, Consent.OptOut, p)) and groups.get((r, m, Consent.OptIn, p)))
    a = bonferroni_alpha(alpha, tests) if bonferroni else alpha
    out = []
    for regime, mechanism in pairs:
        for consent in Consent:
            _require_control(groups, regime, mechanism, consent)
        for persona in CATEGORIES:
            o = groups.get((regime, mechanism, Consent.OptOut, persona), [])
            i = groups.get((regime, mechanism, Consent.OptIn, persona), [])
            if not o and not i:
                continue
            out.append(_verdict(
                regime, mechanism, persona, o, i,
                groups.get((regime, mechanism, Consent.OptOut, CONTROL), []),
                groups.get((regime, mechanism, Consent.OptIn, CONTROL), []),
                a,
            ))
    return out


@dataclass(frozen=True)
class AdvertiserVerdict:
    advertiser: str
    cells_evaluated: int
    cells_flagged: int
    opt_out_syncs: int
    flagged: bool

    def as_dict(self) -> dict:
        return {
            "advertiser": self.advertiser,
            "flagged": self.flagged,
            "cells_evaluated": self.cells_evaluated,
            "cells_flagged": self.cells_flagged,
            "opt_out_syncs": self.opt_out_syncs,
        }


def advertiser_verdicts(
    bids: Iterable[BidRecord],
    leaked: LeakedSet,
    syncs: Iterable[SyncEvent] = (),
    *,
    alpha: float = ALPHA,
    quorum: float = 0.5,
    party_of_advertiser: Optional[Mapping[str, str]] = None,
) -> list[AdvertiserVerdict]:
    """Advertiser-level non-compliance.

    Each advertiser is audited on the personas whose interests were leaked to
    it, comparing its own opt-out bids against its own control and opt-in
    bids. It is flagged when at least ``quorum`` of those cells are flagged, or
    when it sends identifiers to another party during an opt-out session.
    """
    per_adv: dict[str, list[BidRecord]] = defaultdict(list)
    for b in bids:
        per_adv[b.advertiser].append(b)
    party_of_advertiser = party_of_advertiser or {}
    sync_count: dict[str, int] = defaultdict(int)
    for s in syncs:
        if s.session is not None and s.session.consent is Consent.OptOut:
            sync_count[s.sender] += 1

    out = []
    for adv in sorted(per_adv):
        groups = group_cpms(per_adv[adv])
        evaluated = flagged = 0
        for regime, mechanism in sorted({(r, m) for r, m, _, _ in groups}):
            ctrl_out = groups.get((regime, mechanism, Consent.OptOut, CONTROL))
            ctrl_in = groups.get((regime, mechanism, Consent.OptIn, CONTROL))
            if not ctrl_out or not ctrl_in:
                continue
            for persona in CATEGORIES:
                if adv not in leaked.get(persona, ()):
                    continue
                o = groups.get((regime, mechanism, Consent.OptOut, persona))
                i = groups.get((regime, mechanism, Consent.OptIn, persona))
                if not o or not i:
                    continue
                v = _verdict(regime, mechanism, persona, o, i, ctrl_out, ctrl_in, alpha)
                evaluated += 1
                flagged += v.non_compliant
        n_sync = sync_count.get(party_of_advertiser.get(adv, adv), 0)
        is_flagged = n_sync > 0 or (evaluated > 0 and flagged / evaluated >= quorum)
        out.append(AdvertiserVerdict(adv, evaluated, flagged, n_sync, is_flagged))
    return out


# --- tables ----------------------------------------------------------------------------------


def _mech_consent_columns(value_names=("Avg", "Std")) -> list[str]:
    cols = ["Persona"]
    for m in Mechanism:
        for c in Consent:
            cols += [f"{m.value} {c.value} {v}" for v in value_names]
    return cols


def build_bid_table(bids: Iterable[BidRecord], regime: Regime) -> Table:
    """Per-persona mean/std per mechanism and consent, with markers against control."""
    groups = group_cpms(bids)
    for r, m, c in _configs(groups):
        if r is regime:
            _require_control(groups, r, m, c)
    table = Table(
        name=f"bids_{regime.value.lower()}",
        title=f"Ad bidding under {regime.value}",
        columns=_mech_consent_columns(),
    )
    for persona in PERSONAS:
        row: list = [persona]
        for m in Mechanism:
            for c in Consent:
                s = summarize(groups.get((regime, m, c, persona), []))
                if s is None:
                    row += [None, None]
                    continue
                marker = None
                if persona != CONTROL:
                    ctrl = summarize(groups.get((regime, m, c, CONTROL), []))
                    marker = classify_summary(s, ctrl)
                row += [Marked(s.avg, marker), s.std]
        table.rows.append(row)
    return table


@dataclass(frozen=True)
class ConsentComparison:
    test: Optional[UTestResult]
    effect: Optional[EffectSize]


def compare_consent(opt_out: list[float], opt_in: list[float], *, alpha: float = ALPHA) -> ConsentComparison:
    if not opt_out or not opt_in:
        return ConsentComparison(None, None)
    test = mann_whitney_u(opt_out, opt_in)
    return ConsentComparison(test, effect_size(test, alpha=alpha))


def build_consent_table(bids: Iterable[BidRecord], *, alpha: float = ALPHA, bonferroni: bool = False) -> Table:
    """Opt-out vs. opt-in Mann-Whitney p-values and effect sizes per regime and mechanism."""
    groups = group_cpms(bids)
    comparisons = {}
    for r in Regime:
        for m in Mechanism:
            for p in CATEGORIES:
                comparisons[(r, m, p)] = (
                    groups.get((r, m, Consent.OptOut, p), []),
                    groups.get((r, m, Consent.OptIn, p), []),
                )
    n_tests = sum(1 for o, i in comparisons.values() if o and i)
    a = bonferroni_alpha(alpha, n_tests) if bonferroni else alpha
    cols = ["Persona"]
    for r in Regime:
        for m in Mechanism:
            cols += [f"{r.value} {m.value} P", f"{r.value} {m.value} E"]
    table = Table(name="consent_utest", title="Opt-out vs. opt-in Mann-Whitney U test", columns=cols)
    for p in CATEGORIES:
        row: list = [p]
        for r in Regime:
            for m in Mechanism:
                cmp = compare_consent(*comparisons[(r, m, p)], alpha=a)
                if cmp.test is None:
                    row += [None, None]
                else:
                    row += [cmp.test.p, cmp.effect.r if cmp.effect.defined else None]
        table.rows.append(row)
    return table


def _median_summary(cpms_by_adv: Mapping[str, list[float]]) -> Optional[BidSummary]:
    medians = [statistics.median(v) for _, v in sorted(cpms_by_adv.items()) if v]
    return summarize(medians)


def unknown_advertiser_bids(
    bids: Iterable[BidRecord], leaked: LeakedSet, *, control_restriction: str = "union"
) -> Table:
    """Opt-out bids from advertisers that never saw the persona during persona building.

    Each cell summarizes the per-advertiser median bids (mean and population
    std of the medians). Control is restricted to advertisers outside the union
    of all leaked sets (``control_restriction="union"``) or left unrestricted
    (``"none"``).
    """
    if control_restriction not in ("union", "none"):
        raise ValueError(f"unknown control restriction {control_restriction!r}")
    union = frozenset().union(*leaked.values()) if leaked else frozenset()
    per: dict[tuple, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for b in bids:
        if b.consent is not Consent.OptOut:
            continue
        if b.persona == CONTROL:
            if control_restriction == "union" and b.advertiser in union:
                continue
        elif b.advertiser in leaked.get(b.persona, ()):
            continue
        per[(b.regime, b.mechanism, b.persona)][b.advertiser].append(b.cpm)

    cols = ["Persona"]
    for r in Regime:
        for m in Mechanism:
            cols += [f"{r.value} {m.value} Avg", f"{r.value} {m.value} Std"]
    table = Table(name="unknown_advertisers", title="Opt-out bids from advertisers never leaked to", columns=cols)
    for persona in PERSONAS:
        row: list = [persona]
        for r in Regime:
            for m in Mechanism:
                s = _median_summary(per.get((r, m, persona), {}))
                if s is None:
                    row += [None, None]
                    continue
                marker = None
                if persona != CONTROL:
                    ctrl = _median_summary(per.get((r, m, CONTROL), {}))
                    marker = classify_summary(s, ctrl) if ctrl is not None else None
                row += [Marked(s.avg, marker), s.std]
        table.rows.append(row)
    return table


def prevalence(
    bids: Iterable[BidRecord], *, exclude_absent: bool = False
) -> dict[str, dict[Regime, float]]:
    """Percent of the 16 interest personas an advertiser bid on, averaged over OneTrust and CookieBot."""
    seen: dict[tuple, set[str]] = defaultdict(set)
    present: dict[tuple, bool] = defaultdict(bool)
    advertisers: set[str] = set()
    regimes: set[Regime] = set()
    for b in bids:
        if b.consent is not Consent.OptOut or b.mechanism not in CMP_MECHANISMS:
            continue
        advertisers.add(b.advertiser)
        regimes.add(b.regime)
        present[(b.advertiser, b.regime, b.mechanism)] = True
        if b.persona != CONTROL:
            seen[(b.advertiser, b.regime, b.mechanism)].add(b.persona)
    out: dict[str, dict[Regime, float]] = {}
    for adv in sorted(advertisers):
        out[adv] = {}
        for r in sorted(regimes):
            shares = [
                100 * len(seen[(adv, r, m)]) / PREVALENCE_DENOMINATOR
                for m in CMP_MECHANISMS
                if not exclude_absent or present[(adv, r, m)]
            ]
            out[adv][r] = sum(shares) / len(shares) if shares else 0.0
    return out


def advertiser_prevalence(bids: Iterable[BidRecord], *, top_k: Optional[int] = 5, exclude_absent: bool = False) -> Table:
    prev = prevalence(bids, exclude_absent=exclude_absent)
    regimes = list(Regime)
    ranked = sorted(prev, key=lambda a: (-sum(prev[a].get(r, 0.0) for r in regimes), a))
    if top_k is not None:
        ranked = ranked[:top_k]
    table = Table(
        name="prevalence",
        title="Most prevalent advertisers bidding under opt-out (OneTrust and CookieBot)",
        columns=["Advertiser"] + [r.value for r in regimes],
    )
    for adv in ranked:
        table.rows.append([adv] + [Percent(prev[adv].get(r, 0.0), 2) for r in regimes])
    return table


def build_sync_table(stats, regime: Regime) -> Table:
    """Cookie-sync events and participation per persona, mechanism and consent."""
    cols = ["Persona"]
    for m in Mechanism:
        for c in Consent:
            cols += [f"{m.value} {c.value} Evt", f"{m.value} {c.value} Pct"]
    table = Table(name=f"syncs_{regime.value.lower()}", title=f"Cookie syncing under {regime.value}", columns=cols)
    for persona in PERSONAS:
        row: list = [persona]
        for m in Mechanism:
            for c in Consent:
                st = stats.get((regime, m, c, persona))
                if st is None:
                    row += [None, None]
                else:
                    row += [st.events, Percent(st.pct, 1)]
        table.rows.append(row)
    return table


def verdict_table(verdicts: Iterable[AuditVerdict]) -> Table:
    table = Table(
        name="verdicts",
        title="Per-persona compliance verdicts",
        columns=["Regime", "Mechanism", "Persona", "OptOut Avg", "OptIn Avg", "P", "E", "NonCompliant"],
    )
    for v in verdicts:
        table.rows.append([
            v.regime.value, v.mechanism.value, v.persona,
            None if v.opt_out is None else Marked(v.opt_out.avg, v.opt_out_marker),
            None if v.opt_in is None else Marked(v.opt_in.avg, v.opt_in_marker),
            None if v.test is None else v.test.p,
            v.effect.r if v.effect is not None and v.effect.defined else None,
            "yes" if v.non_compliant else "no",
        ])
    return table
