"""Cookie-sync detection: find user identifiers and flag their transmission to other parties.

Identifiers come from cookies a party sets and from non-standard header
fields. A sync is any occurrence of an identifier (verbatim, Base64, SHA1 or
SHA256) in a request bound for a party other than its owner.
"""

from __future__ import annotations

import base64
import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Optional
from urllib.parse import unquote, urlsplit

from .model import Consent, HttpEvent, Mechanism, Regime, SessionData, SessionKey
from .suffix import party_of

MIN_ID_LENGTH = 8
MIN_ENTROPY = 2.5

# Registered or de-facto standard header fields; anything else is "non-standard".
STANDARD_HEADERS = frozenset(
    h.lower()
    for h in """
    Accept Accept-CH Accept-Charset Accept-Encoding Accept-Language Accept-Patch Accept-Post
    Accept-Ranges Access-Control-Allow-Credentials Access-Control-Allow-Headers
    Access-Control-Allow-Methods Access-Control-Allow-Origin Access-Control-Expose-Headers
    Access-Control-Max-Age Access-Control-Request-Headers Access-Control-Request-Method Age Allow
    Alt-Svc Authorization Cache-Control Clear-Site-Data Connection Content-Disposition
    Content-Encoding Content-Language Content-Length Content-Location Content-Range
    Content-Security-Policy Content-Security-Policy-Report-Only Content-Type Cookie
    Cross-Origin-Embedder-Policy Cross-Origin-Opener-Policy Cross-Origin-Resource-Policy Date
    Device-Memory DNT Downlink ECT ETag Expect Expect-CT Expires Forwarded From Host If-Match
    If-Modified-Since If-None-Match If-Range If-Unmodified-Since Keep-Alive Last-Modified Link
    Location Max-Forwards NEL Origin Permissions-Policy Pragma Priority Proxy-Authenticate
    Proxy-Authorization Range Referer Referrer-Policy Report-To Retry-After RTT Save-Data
    Sec-CH-UA Sec-CH-UA-Mobile Sec-CH-UA-Platform Sec-Fetch-Dest Sec-Fetch-Mode Sec-Fetch-Site
    Sec-Fetch-User Sec-GPC Server Server-Timing Set-Cookie SourceMap Strict-Transport-Security TE
    Timing-Allow-Origin Trailer Transfer-Encoding Upgrade Upgrade-Insecure-Requests User-Agent
    Vary Via Viewport-Width Warning Width WWW-Authenticate X-Content-Type-Options
    X-DNS-Prefetch-Control X-Forwarded-For X-Forwarded-Host X-Forwarded-Proto X-Frame-Options
    X-Powered-By X-Requested-With X-XSS-Protection
    """.split()
)

# Request headers never scanned for tokens: Cookie carries the receiver's own
# state, Referer echoes the page URL rather than a deliberate hand-off.
UNSCANNED_REQUEST_HEADERS = frozenset({"cookie", "referer"})

DENY_VALUES = frozenset({"true", "false", "null", "undefined", "none", "yes", "no"})
_LOCALE = re.compile(r"^[a-z]{2,3}([-_][a-z]{2,4}){0,2}$", re.I)
_DATE = re.compile(
    r"^\d{4}[-/.]\d{1,2}[-/.]\d{1,2}([ tT]\d{1,2}:\d{2}(:\d{2}(\.\d+)?)?([zZ]|[+-]\d{2}:?\d{2})?)?$"
    r"|^\d{1,2}[-/.]\d{1,2}[-/.]\d{2,4}$"
    r"|^[A-Z][a-z]{2}, \d{2} [A-Z][a-z]{2} \d{4}"
    r"|^1\d{9}(\d{3})?$"  # epoch seconds / milliseconds
)


class Source(str, Enum):
    CookieSet = "CookieSet"
    NonStandardHeader = "NonStandardHeader"


class Encoding(str, Enum):
    Plain = "Plain"
    Base64 = "Base64"
    SHA1 = "SHA1"
    SHA256 = "SHA256"


ENCODING_ORDER = {e: i for i, e in enumerate(Encoding)}


class Channel(str, Enum):
    UrlComponent = "UrlComponent"
    Header = "Header"
    RedirectChain = "RedirectChain"


@dataclass(frozen=True, order=True)
class IdentifierCandidate:
    owner: str
    name: str
    value: str
    source: Source


@dataclass(frozen=True)
class SyncEvent:
    sender: str
    receiver: str
    identifier: IdentifierCandidate
    encoding: Encoding
    channel: Channel
    event_id: str
    session: Optional[SessionKey] = None

    def as_dict(self) -> dict:
        d = {
            "event_id": self.event_id,
            "sender": self.sender,
            "receiver": self.receiver,
            "encoding": self.encoding.value,
            "channel": self.channel.value,
            "identifier": {
                "owner": self.identifier.owner,
                "name": self.identifier.name,
                "value": self.identifier.value,
                "source": self.identifier.source.value,
            },
        }
        if self.session is not None:
            d["session"] = self.session.as_dict()
        return d


def shannon_entropy(value: str) -> float:
    """Bits per character of the empirical symbol distribution of ``value``."""
    if not value:
        return 0.0
    n = len(value)
    return -sum(c / n * math.log2(c / n) for c in Counter(value).values())


def rejection_reason(value: str, min_length: int = MIN_ID_LENGTH, min_entropy: float = MIN_ENTROPY) -> Optional[str]:
    if len(value) < min_length:
        return "too_short"
    if value.lower() in DENY_VALUES:
        return "deny_list"
    if _LOCALE.match(value):
        return "locale"
    if _DATE.match(value):
        return "date"
    if shannon_entropy(value) < min_entropy:
        return "low_entropy"
    return None


class IdentifierPool:
    """Incremental identifier extraction over a growing event stream.

    Keeps one candidate per (owner, name) with the latest value. A value that
    carries another party's already-known identifier (verbatim or encoded) is
    not re-attributed to the party that merely received it.
    """

    def __init__(self, *, min_length: int = MIN_ID_LENGTH, min_entropy: float = MIN_ENTROPY,
                 diagnostics: Optional[Counter] = None):
        self.min_length = min_length
        self.min_entropy = min_entropy
        self.diagnostics = diagnostics
        self._latest: dict[tuple[str, str], IdentifierCandidate] = {}
        self._token_owner: dict[str, str] = {}
        self._rejected: dict[tuple[str, str], str] = {}

    def _offer(self, owner: str, name: str, value: str, source: Source) -> None:
        current = self._latest.get((owner, name))
        if current is not None and current.value == value:
            return
        reason = self._rejected.get((owner, value))
        if reason is None:
            reason = rejection_reason(value, self.min_length, self.min_entropy)
            if reason is None and any(o != owner and t in value for t, o in self._token_owner.items()):
                reason = "received"
            if reason is not None:
                self._rejected[(owner, value)] = reason
        if reason is not None:
            if self.diagnostics is not None:
                self.diagnostics[reason] += 1
            return
        self._latest[(owner, name)] = IdentifierCandidate(owner, name, value, source)
        for _, token in match_tokens(value):
            self._token_owner.setdefault(token, owner)

    def feed(self, events: Iterable[HttpEvent]) -> None:
        for ev in events:
            for name, value in ev.cookies_set:
                self._offer(ev.party, name, value, Source.CookieSet)
            for name, value in ev.response_headers:
                if name.lower() not in STANDARD_HEADERS:
                    self._offer(ev.party, name, value, Source.NonStandardHeader)
            for name, value in ev.request_headers:
                if name.lower() not in STANDARD_HEADERS:
                    self._offer(ev.party, name, value, Source.NonStandardHeader)

    def candidates(self) -> list[IdentifierCandidate]:
        return [self._latest[k] for k in sorted(self._latest)]


def extract_identifiers(
    events: Iterable[HttpEvent],
    *,
    min_length: int = MIN_ID_LENGTH,
    min_entropy: float = MIN_ENTROPY,
    diagnostics: Optional[Counter] = None,
) -> list[IdentifierCandidate]:
    """Identifier candidates observed in ``events``, one per (owner, name), latest value wins."""
    pool = IdentifierPool(min_length=min_length, min_entropy=min_entropy, diagnostics=diagnostics)
    pool.feed(events)
    return pool.candidates()


def encode_variants(value: str) -> dict[Encoding, str]:
    """The four canonical tokens of ``value``: itself, standard Base64, SHA1 hex, SHA256 hex."""
    if not value:
        raise ValueError("identifier value must be non-empty")
    raw = value.encode("utf-8")
    return {
        Encoding.Plain: value,
        Encoding.Base64: base64.b64encode(raw).decode("ascii"),
        Encoding.SHA1: hashlib.sha1(raw).hexdigest(),
        Encoding.SHA256: hashlib.sha256(raw).hexdigest(),
    }


def match_tokens(value: str) -> list[tuple[Encoding, str]]:
    """All search tokens for ``value``; Base64 in standard and URL-safe, padded and unpadded."""
    variants = encode_variants(value)
    raw = value.encode("utf-8")
    b64 = {
        variants[Encoding.Base64],
        base64.urlsafe_b64encode(raw).decode("ascii"),
    }
    b64 |= {t.rstrip("=") for t in b64}
    tokens = [(Encoding.Plain, value)]
    tokens += [(Encoding.Base64, t) for t in sorted(b64) if t]
    tokens += [(Encoding.SHA1, variants[Encoding.SHA1]), (Encoding.SHA256, variants[Encoding.SHA256])]
    return tokens


def _url_haystacks(url: str) -> tuple[str, ...]:
    parts = urlsplit(url)
    tail = parts.path + ("?" + parts.query if parts.query else "")
    decoded = unquote(tail)
    return (tail,) if decoded == tail else (tail, decoded)


class _TokenIndex:
    """Every search token of a set of identifiers, indexed by a fixed-length prefix."""

    def __init__(self, ids: Iterable[IdentifierCandidate]):
        self.ids = list(ids)
        entries = [(token, i, enc) for i, ident in enumerate(self.ids) for enc, token in match_tokens(ident.value)]
        self.k = min((len(t) for t, _, _ in entries), default=1)
        self.by_prefix: dict[str, list[tuple[str, int, Encoding]]] = {}
        for token, i, enc in entries:
            self.by_prefix.setdefault(token[: self.k], []).append((token, i, enc))

    def hits(self, haystacks: Iterable[str]) -> set[tuple[int, Encoding]]:
        out = set()
        k = self.k
        lookup = self.by_prefix.get
        for h in haystacks:
            for pos in range(len(h) - k + 1):
                bucket = lookup(h[pos:pos + k])
                if bucket:
                    for token, i, enc in bucket:
                        if h.startswith(token, pos):
                            out.add((i, enc))
        return out


def detect_syncs(events: Iterable[HttpEvent], ids: Iterable[IdentifierCandidate]) -> list[SyncEvent]:
    """Flag every occurrence of an identifier token in a request to a party other than its owner.

    Output holds one SyncEvent per (event, identifier, encoding), ordered by
    event_id, then encoding. When a token shows up in more than one place of
    the same request the URL wins over headers.
    """
    index = _TokenIndex(ids)
    found: list[SyncEvent] = []
    if not index.ids:
        return found
    for ev in events:
        url_hits = index.hits(_url_haystacks(ev.url))
        header_hits = index.hits(v for n, v in ev.request_headers if n.lower() not in UNSCANNED_REQUEST_HEADERS)
        url_channel = Channel.RedirectChain if ev.redirect_from is not None else Channel.UrlComponent
        for hits, channel in ((url_hits, url_channel), (header_hits - url_hits, Channel.Header)):
            for i, encoding in hits:
                ident = index.ids[i]
                if ident.owner != ev.party:
                    found.append(SyncEvent(ident.owner, ev.party, ident, encoding, channel, ev.event_id, ev.session))
    found.sort(key=lambda s: (s.event_id, ENCODING_ORDER[s.encoding], s.identifier.owner, s.identifier.name))
    return found


def scan_sessions(sessions: Mapping[SessionKey, SessionData], **kwargs) -> list[SyncEvent]:
    """Detect syncs across sessions.

    Identifiers are pooled per browser profile (persona and configuration), so
    a session also sees identifiers set during its earlier iterations.
    """
    profiles: dict[tuple, list[SessionKey]] = {}
    for key in sessions:
        profiles.setdefault((key.persona, key.regime, key.mechanism, key.consent), []).append(key)
    out: list[SyncEvent] = []
    for keys in profiles.values():
        pool = IdentifierPool(**kwargs)
        for key in sorted(keys, key=lambda k: k.iteration):
            events = sessions[key].events
            pool.feed(events)
            out.extend(detect_syncs(events, pool.candidates()))
    out.sort(key=lambda s: (s.event_id, ENCODING_ORDER[s.encoding], s.identifier.owner, s.identifier.name))
    return out


# --- statistics --------------------------------------------------------------------


@dataclass(frozen=True)
class SyncStat:
    events: int
    pct: Optional[float]  # None renders as "--"
    participants: int = 0
    observed: int = 0


ConfigKey = tuple[Regime, Mechanism, Consent, str]


def observed_advertisers(events: Iterable[HttpEvent]) -> set[str]:
    """Third-party parties: requests issued from a page (or redirect) of another party."""
    out = set()
    for ev in events:
        if ev.referrer is None and ev.redirect_from is None:
            continue
        if ev.referrer is not None:
            try:
                if party_of(ev.referrer) == ev.party:
                    continue
            except ValueError:
                pass
        out.add(ev.party)
    return out


def sync_stats(
    syncs: Iterable[SyncEvent],
    sessions: Mapping[SessionKey, SessionData],
    advertisers: Optional[set[str]] = None,
) -> dict[ConfigKey, SyncStat]:
    """Event counts and participating-advertiser percentages per (regime, mechanism, consent, persona).

    Iterations are pooled. The percentage is participants / observed
    advertisers x 100, rounded to one decimal, and None when no sync happened.
    """
    observed: dict[ConfigKey, set[str]] = {}
    for key, data in sessions.items():
        ck = (key.regime, key.mechanism, key.consent, key.persona)
        parties = observed.setdefault(ck, set())
        if advertisers is not None:
            parties |= {ev.party for ev in data.events if ev.party in advertisers}
            parties |= {b.advertiser for b in data.bids if b.advertiser in advertisers}
        else:
            parties |= observed_advertisers(data.events)
    counts: Counter = Counter()
    participants: dict[ConfigKey, set[str]] = {}
    for s in syncs:
        if s.sender == s.receiver or s.session is None:
            continue
        ck = (s.session.regime, s.session.mechanism, s.session.consent, s.session.persona)
        counts[ck] += 1
        participants.setdefault(ck, set()).update((s.sender, s.receiver))
        observed.setdefault(ck, set())
    out: dict[ConfigKey, SyncStat] = {}
    for ck in sorted(observed):
        seen = observed[ck] | participants.get(ck, set())
        part = participants.get(ck, set()) & seen
        n = counts[ck]
        pct = round(100 * len(part) / len(seen), 1) if n and seen else None
        out[ck] = SyncStat(events=n, pct=pct, participants=len(part), observed=len(seen))
    return out
