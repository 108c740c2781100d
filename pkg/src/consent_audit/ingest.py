"""Parse bid logs and HTTP event logs into canonical records, and bucket them by session.

Both log formats start with the version line ``consent-audit-log/1``. The bid
log continues with one JSON object per line; the HTTP log continues with a
single JSON document holding an ``entries`` array (a small subset of HAR).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .model import (
    LOG_HEADER,
    PERSONAS,
    BidRecord,
    Consent,
    HttpEvent,
    Mechanism,
    Regime,
    SessionData,
    SessionKey,
)
from .suffix import party_of

log = logging.getLogger(__name__)

BID_FIELDS = ("persona", "site", "advertiser", "cpm", "regime", "mechanism", "consent", "iteration", "ts")


class LogParseError(ValueError):
    """A structurally malformed record; carries the 1-based line number and field."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass
class ParseReport:
    accepted: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)

    def reject(self, line: int, reason: str) -> None:
        self.rejected.append((line, reason))


def _lines(stream) -> Iterable[str]:
    if isinstance(stream, str):
        return stream.splitlines()
    return stream


def _check_header(first: str) -> None:
    if first.strip() != LOG_HEADER:
        raise LogParseError(f"expected version header {LOG_HEADER!r}, got {first.strip()[:40]!r}", line=1)


class _Rejected(Exception):
    pass


def _enum(cls, value, name: str):
    try:
        return cls(value)
    except ValueError:
        raise _Rejected(f"unknown {name} {value!r}") from None


def _session_fields(obj: dict, line: int) -> SessionKey:
    persona = obj.get("persona")
    if not isinstance(persona, str):
        raise LogParseError("missing or non-string value", line, "persona")
    if persona not in PERSONAS:
        raise _Rejected(f"unknown persona {persona!r}")
    regime = _enum(Regime, obj.get("regime"), "regime")
    mechanism = _enum(Mechanism, obj.get("mechanism"), "mechanism")
    consent = _enum(Consent, obj.get("consent"), "consent")
    iteration = obj.get("iteration")
    if isinstance(iteration, bool) or not isinstance(iteration, int) or iteration not in (1, 2, 3):
        raise LogParseError(f"iteration must be an integer in 1..3, got {iteration!r}", line, "iteration")
    return SessionKey(persona, regime, mechanism, consent, iteration)


def _bid_from_obj(obj, line: int) -> BidRecord:
    if not isinstance(obj, dict):
        raise LogParseError("record is not an object", line)
    missing = [f for f in BID_FIELDS if f not in obj]
    if missing:
        raise LogParseError("missing field", line, missing[0])
    extra = sorted(set(obj) - set(BID_FIELDS))
    if extra:
        raise LogParseError("unexpected field", line, extra[0])
    for name in ("site", "advertiser"):
        if not isinstance(obj[name], str) or not obj[name]:
            raise LogParseError("expected a non-empty string", line, name)
    cpm = obj["cpm"]
    if isinstance(cpm, bool) or not isinstance(cpm, (int, float)) or cpm != cpm:
        raise LogParseError(f"expected a number, got {cpm!r}", line, "cpm")
    if cpm < 0:
        raise LogParseError(f"cpm must be non-negative, got {cpm!r}", line, "cpm")
    ts = obj["ts"]
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise LogParseError(f"expected integer milliseconds, got {ts!r}", line, "ts")
    key = _session_fields(obj, line)
    return BidRecord(
        persona=key.persona,
        site=obj["site"],
        advertiser=obj["advertiser"],
        cpm=float(cpm),
        regime=key.regime,
        mechanism=key.mechanism,
        consent=key.consent,
        iteration=key.iteration,
        timestamp=ts,
    )


def parse_bid_log(stream, report: Optional[ParseReport] = None) -> list[BidRecord]:
    """Parse a line-delimited bid log.

    ``stream`` is a string or any iterable of lines. Malformed lines raise
    LogParseError; lines with an unknown persona, regime, mechanism or consent
    value are dropped and listed in ``report``.
    """
    report = report if report is not None else ParseReport()
    records: list[BidRecord] = []
    it = iter(_lines(stream))
    first = next(it, None)
    if first is None or (not first.strip() and not any(ln.strip() for ln in it)):
        return records
    _check_header(first)
    for lineno, text in enumerate(it, start=2):
        if not text.strip():
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise LogParseError(f"invalid JSON ({exc.msg})", lineno) from None
        try:
            records.append(_bid_from_obj(obj, lineno))
        except _Rejected as exc:
            report.reject(lineno, str(exc))
            continue
        report.accepted += 1
    if report.rejected:
        log.warning("bid log: rejected %d line(s)", len(report.rejected))
    return records


def bid_to_obj(bid: BidRecord) -> dict:
    return {
        "persona": bid.persona,
        "site": bid.site,
        "advertiser": bid.advertiser,
        "cpm": bid.cpm,
        "regime": bid.regime.value,
        "mechanism": bid.mechanism.value,
        "consent": bid.consent.value,
        "iteration": bid.iteration,
        "ts": bid.timestamp,
    }


def serialize_bids(bids: Iterable[BidRecord]) -> str:
    out = [LOG_HEADER]
    out.extend(json.dumps(bid_to_obj(b), separators=(",", ":")) for b in bids)
    return "\n".join(out) + "\n"


# --- HTTP log -------------------------------------------------------------


def _pairs(value, line: int, name: str) -> tuple[tuple[str, str], ...]:
    if value is None:
        return ()
    if not isinstance(value, list):
        raise LogParseError("expected a list of {name, value} objects", line, name)
    out = []
    for item in value:
        if not isinstance(item, dict) or not isinstance(item.get("name"), str) or not isinstance(item.get("value"), str):
            raise LogParseError("expected {name, value} string pairs", line, name)
        out.append((item["name"], item["value"]))
    return tuple(out)


def _event_from_entry(entry, idx: int) -> HttpEvent:
    if not isinstance(entry, dict):
        raise LogParseError("entry is not an object", idx)
    event_id = entry.get("event_id")
    if not isinstance(event_id, str) or not event_id:
        raise LogParseError("missing event_id", idx, "event_id")
    session = entry.get("session")
    if not isinstance(session, dict):
        raise LogParseError("missing session object", idx, "session")
    key = _session_fields(session, idx)
    request = entry.get("request")
    response = entry.get("response") or {}
    if not isinstance(request, dict) or not isinstance(request.get("url"), str):
        raise LogParseError("missing request.url", idx, "request.url")
    if not isinstance(response, dict):
        raise LogParseError("response is not an object", idx, "response")
    url = request["url"]
    try:
        party = party_of(url)
    except ValueError as exc:
        raise _Rejected(f"event {event_id}: {exc}") from None
    referrer = entry.get("referrer")
    redirect_from = entry.get("redirect_from")
    for name, value in (("referrer", referrer), ("redirect_from", redirect_from)):
        if value is not None and not isinstance(value, str):
            raise LogParseError("expected a string", idx, name)
    return HttpEvent(
        event_id=event_id,
        session=key,
        url=url,
        party=party,
        request_headers=_pairs(request.get("headers"), idx, "request.headers"),
        response_headers=_pairs(response.get("headers"), idx, "response.headers"),
        cookies_sent=_pairs(request.get("cookies"), idx, "request.cookies"),
        cookies_set=_pairs(response.get("cookies"), idx, "response.cookies"),
        referrer=referrer,
        redirect_from=redirect_from,
    )


def parse_http_log(stream, report: Optional[ParseReport] = None) -> list[HttpEvent]:
    """Parse an HTTP event log and resolve its redirect links.

    Entry positions stand in for line numbers in error messages (1-based).
    Entries whose URL has no registrable domain are rejected into ``report``.
    """
    report = report if report is not None else ParseReport()
    text = stream if isinstance(stream, str) else "".join(
        ln if ln.endswith("\n") else ln + "\n" for ln in stream
    )
    if not text.strip():
        return []
    first, _, body = text.partition("\n")
    _check_header(first)
    if not body.strip():
        return []
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise LogParseError(f"invalid JSON ({exc.msg})", exc.lineno + 1) from None
    entries = doc.get("entries") if isinstance(doc, dict) else None
    if not isinstance(entries, list):
        raise LogParseError("document has no entries[] array", field="entries")

    events: list[HttpEvent] = []
    by_id: dict[str, HttpEvent] = {}
    for idx, entry in enumerate(entries, start=1):
        try:
            ev = _event_from_entry(entry, idx)
        except _Rejected as exc:
            report.reject(idx, str(exc))
            continue
        if ev.event_id in by_id:
            raise LogParseError(f"duplicate event_id {ev.event_id!r}", idx, "event_id")
        by_id[ev.event_id] = ev
        events.append(ev)
        report.accepted += 1
    for ev in events:
        if ev.redirect_from is None:
            continue
        origin = by_id.get(ev.redirect_from)
        if origin is None:
            raise LogParseError(f"event {ev.event_id!r} redirects from unknown event {ev.redirect_from!r}",
                                field="redirect_from")
        if origin.session != ev.session:
            raise LogParseError(f"event {ev.event_id!r} redirects from another session", field="redirect_from")
    return events


def event_to_entry(ev: HttpEvent) -> dict:
    def pairs(ps):
        return [{"name": n, "value": v} for n, v in ps]

    entry = {
        "event_id": ev.event_id,
        "session": ev.session.as_dict(),
        "request": {"url": ev.url, "headers": pairs(ev.request_headers), "cookies": pairs(ev.cookies_sent)},
        "response": {"headers": pairs(ev.response_headers), "cookies": pairs(ev.cookies_set)},
    }
    if ev.referrer is not None:
        entry["referrer"] = ev.referrer
    if ev.redirect_from is not None:
        entry["redirect_from"] = ev.redirect_from
    return entry


def serialize_events(events: Iterable[HttpEvent]) -> str:
    entries = [json.dumps(event_to_entry(ev), separators=(",", ":")) for ev in events]
    if not entries:
        return LOG_HEADER + '\n{"entries":[]}\n'
    return LOG_HEADER + '\n{"entries":[\n' + ",\n".join(entries) + "\n]}\n"


def partition_sessions(
    bids: Iterable[BidRecord], events: Iterable[HttpEvent] = ()
) -> dict[SessionKey, SessionData]:
    """Group records by session key; the returned dict iterates in key order."""
    buckets: dict[SessionKey, SessionData] = {}
    for bid in bids:
        buckets.setdefault(bid.session, SessionData()).bids.append(bid)
    for ev in events:
        buckets.setdefault(ev.session, SessionData()).events.append(ev)
    return {key: buckets[key] for key in sorted(buckets)}
