"""Canonical records shared by every stage of the audit pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

LOG_HEADER = "consent-audit-log/1"

CATEGORIES = (
    "Adult",
    "Arts",
    "Business",
    "Computers",
    "Games",
    "Health",
    "Home",
    "Kids",
    "News",
    "Recreation",
    "Reference",
    "Regional",
    "Science",
    "Shopping",
    "Society",
    "Sports",
)
CONTROL = "Control"
# Report row order: the 16 interest personas, then the baseline.
PERSONAS = CATEGORIES + (CONTROL,)


class Regime(str, Enum):
    GDPR = "GDPR"
    CCPA = "CCPA"


class Mechanism(str, Enum):
    OneTrust = "OneTrust"
    CookieBot = "CookieBot"
    NAI = "NAI"


class Consent(str, Enum):
    OptOut = "OptOut"
    OptIn = "OptIn"


@dataclass(frozen=True, order=True)
class SessionKey:
    """One crawl session: a persona's bid-collection visit under one configuration.

    Field order defines the (lexicographic) sort order used for report rows.
    """

    persona: str
    regime: Regime
    mechanism: Mechanism
    consent: Consent
    iteration: int

    @property
    def config(self) -> tuple[Regime, Mechanism, Consent]:
        return (self.regime, self.mechanism, self.consent)

    def as_dict(self) -> dict:
        return {
            "persona": self.persona,
            "regime": self.regime.value,
            "mechanism": self.mechanism.value,
            "consent": self.consent.value,
            "iteration": self.iteration,
        }


@dataclass(frozen=True)
class BidRecord:
    persona: str
    site: str
    advertiser: str
    cpm: float
    regime: Regime
    mechanism: Mechanism
    consent: Consent
    iteration: int
    timestamp: int = 0

    def __post_init__(self):
        if self.persona not in PERSONAS:
            raise ValueError(f"unknown persona {self.persona!r}")
        if not self.cpm >= 0:
            raise ValueError(f"cpm must be non-negative, got {self.cpm!r}")
        if self.iteration not in (1, 2, 3):
            raise ValueError(f"iteration must be 1..3, got {self.iteration!r}")

    @property
    def session(self) -> SessionKey:
        return SessionKey(self.persona, self.regime, self.mechanism, self.consent, self.iteration)


Pair = tuple[str, str]


@dataclass(frozen=True)
class HttpEvent:
    event_id: str
    session: SessionKey
    url: str
    party: str
    request_headers: tuple[Pair, ...] = ()
    response_headers: tuple[Pair, ...] = ()
    cookies_sent: tuple[Pair, ...] = ()
    cookies_set: tuple[Pair, ...] = ()
    referrer: Optional[str] = None
    redirect_from: Optional[str] = None


@dataclass
class SessionData:
    bids: list[BidRecord] = field(default_factory=list)
    events: list[HttpEvent] = field(default_factory=list)
