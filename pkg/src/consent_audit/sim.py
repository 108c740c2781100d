"""A deterministic synthetic ad ecosystem with ground-truth compliance labels.

The simulator replays the measurement protocol: personas leak their interest
to advertisers present on category sites, then each persona visits the
header-bidding sites of every regime/mechanism once to register consent and
three more times to collect bids. Advertisers bid log-normally and multiply
their bid by ``uplift`` when they hold (and are willing to use) the persona's
interest; sharers forward their user identifier to partners in cookie syncs,
handing over that interest one visit later.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import random
from dataclasses import asdict, dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import yaml

from .model import (
    CATEGORIES,
    CONTROL,
    PERSONAS,
    BidRecord,
    Consent,
    HttpEvent,
    Mechanism,
    Regime,
    SessionKey,
)
from .sync import Channel, Encoding, rejection_reason

EPOCH_MS = 1_600_000_000_000


class Profile(str, Enum):
    Compliant = "Compliant"
    NonCompliantProcessor = "NonCompliantProcessor"
    NonCompliantSharer = "NonCompliantSharer"

    @property
    def non_compliant(self) -> bool:
        return self is not Profile.Compliant


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PersonaSpec:
    category: str
    sites_visited: int = 50

    @property
    def interest_vector(self) -> tuple[int, ...]:
        if self.category == CONTROL:
            return ()
        return tuple(int(c == self.category) for c in CATEGORIES)


@dataclass(frozen=True)
class Partner:
    identity: str
    encoding: Optional[Encoding] = None  # drawn per edge when None
    channel: Optional[Channel] = None


@dataclass(frozen=True)
class AdvertiserProfile:
    identity: str
    profile: Profile
    base_mu: float = -2.3
    base_sigma: float = 0.5
    uplift: float = 1.0
    partners: tuple[Partner, ...] = ()


@dataclass(frozen=True)
class SimConfig:
    seed: int
    personas: tuple[PersonaSpec, ...]
    advertisers: tuple[AdvertiserProfile, ...]
    regimes: tuple[Regime, ...] = (Regime.GDPR, Regime.CCPA)
    mechanisms: tuple[Mechanism, ...] = (Mechanism.OneTrust, Mechanism.CookieBot, Mechanism.NAI)
    bids_per_visit: int = 50
    iterations: int = 3
    sites_per_mechanism: int = 6
    site_presence: float = 0.6
    category_coverage: float = 0.75
    category_site_presence: float = 0.1

    def validate(self) -> None:
        if not self.personas:
            raise ConfigError("config has no personas")
        for p in self.personas:
            if p.category not in PERSONAS:
                raise ConfigError(f"unknown persona category {p.category!r}")
            if p.sites_visited < 0:
                raise ConfigError(f"persona {p.category}: sites_visited must be >= 0")
        if len({p.category for p in self.personas}) != len(self.personas):
            raise ConfigError("duplicate persona category")
        if not self.advertisers:
            raise ConfigError("config has no advertisers")
        ids = [a.identity for a in self.advertisers]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate advertiser identity")
        for a in self.advertisers:
            if not (a.uplift >= 1):
                raise ConfigError(f"advertiser {a.identity}: uplift must be >= 1, got {a.uplift}")
            if not a.base_sigma >= 0:
                raise ConfigError(f"advertiser {a.identity}: base_sigma must be >= 0")
            for partner in a.partners:
                if partner.identity == a.identity:
                    raise ConfigError(f"advertiser {a.identity} lists itself as a partner")
                if partner.identity not in ids:
                    raise ConfigError(f"advertiser {a.identity}: unknown partner {partner.identity}")
        if not 1 <= self.iterations <= 3:
            raise ConfigError("iterations must be in 1..3")
        if self.bids_per_visit < 0 or self.sites_per_mechanism < 1:
            raise ConfigError("bids_per_visit must be >= 0 and sites_per_mechanism >= 1")
        for name in ("site_presence", "category_coverage", "category_site_presence"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be a probability")
        if not self.regimes or not self.mechanisms:
            raise ConfigError("at least one regime and one mechanism required")

    def with_seed(self, seed: int) -> "SimConfig":
        return SimConfig(**{**self.__dict__, "seed": seed})

    def to_dict(self) -> dict:
        def enc(v):
            if isinstance(v, Enum):
                return v.value
            if isinstance(v, dict):
                return {k: enc(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [enc(x) for x in v]
            return v

        return enc(asdict(self))

    @property
    def run_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class GroundTruth:
    run_id: str
    profiles: dict[str, Profile]
    leaked: dict[str, list[str]]
    planted: list[dict] = field(default_factory=list)
    knowledge_via_sync: list[dict] = field(default_factory=list)

    def non_compliant(self) -> set[str]:
        return {a for a, p in self.profiles.items() if p.non_compliant}

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "profiles": {a: p.value for a, p in sorted(self.profiles.items())},
            "leaked": self.leaked,
            "planted": self.planted,
            "knowledge_via_sync": self.knowledge_via_sync,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroundTruth":
        return cls(
            run_id=d["run_id"],
            profiles={a: Profile(p) for a, p in d["profiles"].items()},
            leaked={k: list(v) for k, v in d["leaked"].items()},
            planted=list(d.get("planted", [])),
            knowledge_via_sync=list(d.get("knowledge_via_sync", [])),
        )


@dataclass
class SimOutput:
    bids: list[BidRecord]
    events: list[HttpEvent]
    truth: GroundTruth
    leaked: dict[str, frozenset]


# --- random streams --------------------------------------------------------------------


def stream(seed: int, *labels) -> random.Random:
    """An independent generator for one labelled purpose, split from the master seed."""
    blob = "\x1f".join([str(seed)] + [str(x.value if isinstance(x, Enum) else x) for x in labels])
    return random.Random(int.from_bytes(hashlib.sha256(blob.encode()).digest()[:16], "big"))


_ID_ALPHABET = "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"


def _mint_id(rng: random.Random, n: int) -> str:
    """A random user identifier that the identifier heuristics accept."""
    while True:
        value = "".join(rng.choice(_ID_ALPHABET) for _ in range(n))
        if rejection_reason(value) is None:
            return value


# --- world layout ----------------------------------------------------------------------


def leaked_sets(config: SimConfig) -> dict[str, frozenset]:
    """Advertisers present on at least one category site visited while building each persona."""
    out = {}
    for persona_spec in config.personas:
        if persona_spec.category == CONTROL:
            out[CONTROL] = frozenset()
            continue
        got = set()
        for adv in config.advertisers:
            if stream(config.seed, "coverage", adv.identity, persona_spec.category).random() >= config.category_coverage:
                continue
            rng = stream(config.seed, "category-sites", adv.identity, persona_spec.category)
            if any(rng.random() < config.category_site_presence for _ in range(persona_spec.sites_visited)):
                got.add(adv.identity)
        out[persona_spec.category] = frozenset(got)
    return out


def site_name(regime: Regime, mechanism: Mechanism, k: int) -> str:
    return f"pub-{regime.value.lower()}-{mechanism.value.lower()}-{k:02d}.com"


def site_layout(config: SimConfig) -> dict[tuple[Regime, Mechanism], list[tuple[str, list[str]]]]:
    """Measurement sites per (regime, mechanism) with the advertisers embedded on each."""
    idents = sorted(a.identity for a in config.advertisers)
    layout = {}
    for r in config.regimes:
        for m in config.mechanisms:
            sites = []
            for k in range(config.sites_per_mechanism):
                name = site_name(r, m, k)
                present = [a for a in idents if stream(config.seed, "site", name, a).random() < config.site_presence]
                if not present:
                    present = [stream(config.seed, "site-fallback", name).choice(idents)]
                sites.append((name, present))
            layout[(r, m)] = sites
    return layout


def _encode_token(value: str, encoding: Encoding, urlsafe: bool) -> str:
    if encoding is Encoding.Plain:
        return value
    if encoding is Encoding.Base64:
        raw = value.encode()
        return (base64.urlsafe_b64encode(raw) if urlsafe else base64.b64encode(raw)).decode().rstrip("=" if urlsafe else "")
    if encoding is Encoding.SHA1:
        return hashlib.sha1(value.encode()).hexdigest()
    return hashlib.sha256(value.encode()).hexdigest()


# --- simulation ----------------------------------------------------------------------------


class _EventLog:
    def __init__(self):
        self.events: list[HttpEvent] = []

    def add(self, session: SessionKey, url: str, party: str, **kw) -> HttpEvent:
        s = session
        prefix = f"{s.persona}.{s.regime.value}.{s.mechanism.value}.{s.consent.value}.{s.iteration}"
        ev = HttpEvent(event_id=f"{prefix}.{len(self.events):06d}", session=session, url=url, party=party, **kw)
        self.events.append(ev)
        return ev


def simulate(config: SimConfig, *, http: bool = True) -> SimOutput:
    """Run both phases for every persona/regime/mechanism/consent; fully determined by ``config``.

    ``http=False`` skips HTTP event generation (bids, leaks and knowledge
    propagation are unaffected).
    """
    config.validate()
    seed = config.seed
    advs = {a.identity: a for a in config.advertisers}
    leaked = leaked_sets(config)
    layout = site_layout(config)
    truth = GroundTruth(
        run_id=config.run_id,
        profiles={a: advs[a].profile for a in sorted(advs)},
        leaked={p: sorted(v) for p, v in sorted(leaked.items())},
    )
    bids: list[BidRecord] = []
    log = _EventLog()

    personas = sorted(config.personas, key=lambda s: PERSONAS.index(s.category))
    for persona_spec in personas:
        persona = persona_spec.category
        for regime in config.regimes:
            for mechanism in config.mechanisms:
                sites = layout[(regime, mechanism)]
                for consent in Consent:
                    _measure(config, advs, persona, regime, mechanism, consent, sites,
                             set(leaked[persona]), bids, log if http else None, truth)
    return SimOutput(bids=bids, events=log.events, truth=truth, leaked=leaked)


def _uses_knowledge(adv: AdvertiserProfile, consent: Consent) -> bool:
    return consent is Consent.OptIn or adv.profile.non_compliant


def _syncs(adv: AdvertiserProfile, consent: Consent) -> bool:
    return consent is Consent.OptIn or adv.profile is Profile.NonCompliantSharer


def _measure(config, advs, persona, regime, mechanism, consent, sites, knowledge, bids, log, truth):
    seed = config.seed
    tag = (persona, regime, mechanism, consent)
    uids = {a: _mint_id(stream(seed, "uid", *tag, a), 20) for a in sorted(advs)}
    profile_ids = {a: _mint_id(stream(seed, "profile-id", *tag, a), 24) for a in sorted(advs)}
    embedded = sorted({a for _, present in sites for a in present})
    clock = EPOCH_MS + 3_600_000 * (PERSONAS.index(persona) * 100 + list(Regime).index(regime) * 20
                                    + list(Mechanism).index(mechanism) * 4 + list(Consent).index(consent) * 2)

    # The consent-registration visit yields no bids; it only takes time.
    register = stream(seed, "register", *tag)
    clock += sum(int(register.uniform(10, 30) * 1000) for _ in sites)
    for iteration in range(1, config.iterations + 1):
        visit = (*tag, iteration)
        session = SessionKey(persona, regime, mechanism, consent, iteration)
        alloc = stream(seed, "alloc", *visit)
        # Inter-visit waits (10-30 s) only move the timestamps.
        site_ts = {}
        for name, _ in sites:
            clock += int(alloc.uniform(10, 30) * 1000)
            site_ts[name] = clock
        counts: dict[tuple[str, str], int] = {}
        for _ in range(config.bids_per_visit):
            name, present = sites[alloc.randrange(len(sites))]
            adv = present[alloc.randrange(len(present))]
            counts[(name, adv)] = counts.get((name, adv), 0) + 1
        for adv_id in sorted({a for _, a in counts}):
            adv = advs[adv_id]
            rng = stream(seed, "bid", persona, adv_id, *visit[1:])
            boost = adv.uplift if adv_id in knowledge and _uses_knowledge(adv, consent) else 1.0
            for name, _ in sites:
                for j in range(counts.get((name, adv_id), 0)):
                    cpm = math.exp(rng.gauss(adv.base_mu, adv.base_sigma)) * boost
                    bids.append(BidRecord(persona, name, adv_id, cpm, regime, mechanism, consent, iteration,
                                          site_ts[name] + j))

        gained = set()
        first_site: dict[str, str] = {}
        for name, present in sites:
            for a in present:
                first_site.setdefault(a, name)
        if log is not None:
            for name, present in sites:
                page = f"https://www.{name}/"
                log.add(session, page, name)
                for a in present:
                    log.add(
                        session, f"https://bid.{a}/hb?site={name}", a,
                        request_headers=(("Referer", page),),
                        cookies_sent=(("uid", uids[a]),) if iteration > 1 else (),
                        cookies_set=(("uid", uids[a]),),
                        response_headers=(("Content-Type", "application/json"), ("X-Ad-Profile", profile_ids[a])),
                        referrer=page,
                    )
        for a in embedded:
            adv = advs[a]
            if not _syncs(adv, consent):
                continue
            for partner in sorted(adv.partners, key=lambda p: p.identity):
                edge = stream(seed, "edge", a, partner.identity)
                encoding = partner.encoding or edge.choice(list(Encoding))
                channel = partner.channel or edge.choice(list(Channel))
                urlsafe = edge.random() < 0.5
                if a in knowledge and partner.identity not in knowledge:
                    gained.add(partner.identity)
                    truth.knowledge_via_sync.append({
                        "persona": persona, "regime": regime.value, "mechanism": mechanism.value,
                        "consent": consent.value, "iteration": iteration + 1,
                        "advertiser": partner.identity, "from": a,
                    })
                if log is None:
                    continue
                token = _encode_token(uids[a], encoding, urlsafe)
                page = f"https://www.{first_site[a]}/"
                b = partner.identity
                if channel is Channel.RedirectChain:
                    hop = log.add(session, f"https://sync.{a}/redirect?partner={b}", a,
                                  cookies_sent=(("uid", uids[a]),), referrer=page)
                    ev = log.add(session, f"https://match.{b}/setuid?src={a}&puid={token}", b,
                                 referrer=page, redirect_from=hop.event_id)
                elif channel is Channel.UrlComponent:
                    ev = log.add(session, f"https://match.{b}/pixel?src={a}&puid={token}", b, referrer=page)
                else:
                    ev = log.add(session, f"https://match.{b}/pixel?src={a}", b, referrer=page,
                                 request_headers=(("X-Partner-Uid", token),))
                truth.planted.append({
                    "event_id": ev.event_id, "sender": a, "receiver": b,
                    "encoding": encoding.value, "channel": channel.value, "session": session.as_dict(),
                })
        knowledge |= gained


# --- evaluation ------------------------------------------------------------------------------


class RunMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Evaluation:
    precision: Optional[float]  # None when nothing was flagged
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int


def _score(flagged: set[str], positives: set[str], universe: set[str]) -> Evaluation:
    tp = len(flagged & positives)
    fp = len(flagged - positives)
    fn = len(positives - flagged)
    tn = len(universe - flagged - positives)
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else 1.0
    return Evaluation(precision, recall, tp, fp, fn, tn)


def evaluate_audit(verdicts, truth: GroundTruth, *, run_id: Optional[str] = None) -> Evaluation:
    """Advertiser-level precision/recall of ``verdicts`` (AdvertiserVerdict list) against ``truth``."""
    if run_id is not None and run_id != truth.run_id:
        raise RunMismatchError(f"verdicts from run {run_id} scored against ground truth of run {truth.run_id}")
    flagged = {v.advertiser for v in verdicts if v.flagged}
    return _score(flagged, truth.non_compliant(), set(truth.profiles))


def aggregate(evals: Sequence[Evaluation]) -> Evaluation:
    tp = sum(e.tp for e in evals)
    fp = sum(e.fp for e in evals)
    fn = sum(e.fn for e in evals)
    tn = sum(e.tn for e in evals)
    return Evaluation(tp / (tp + fp) if tp + fp else None, tp / (tp + fn) if tp + fn else 1.0, tp, fp, fn, tn)


# --- scenario files ---------------------------------------------------------------------------


def _partners(raw) -> tuple[Partner, ...]:
    if raw is None:
        return ()
    out = []
    if isinstance(raw, Mapping):
        raw = [{"identity": k, **(v if isinstance(v, Mapping) else {"encoding": v})} for k, v in raw.items()]
    for item in raw:
        if isinstance(item, str):
            out.append(Partner(item))
            continue
        try:
            out.append(Partner(
                identity=item["identity"],
                encoding=None if item.get("encoding") is None else Encoding(item["encoding"]),
                channel=None if item.get("channel") is None else Channel(item["channel"]),
            ))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad partner entry {item!r}: {exc}") from None
    return tuple(out)


def scenario_from_dict(d: Mapping, seed: Optional[int] = None) -> SimConfig:
    """Build a SimConfig from a parsed scenario document."""
    if not isinstance(d, Mapping):
        raise ConfigError("scenario must be a mapping")
    try:
        sites_visited = int(d.get("sites_visited", 50))
        personas = d.get("personas", "all")
        if personas == "all":
            personas = list(PERSONAS)
        persona_specs = tuple(
            PersonaSpec(p, sites_visited) if isinstance(p, str)
            else PersonaSpec(p["category"], int(p.get("sites_visited", sites_visited)))
            for p in personas
        )
        advertisers = tuple(
            AdvertiserProfile(
                identity=a["identity"],
                profile=Profile(a["profile"]),
                base_mu=float(a.get("base_mu", -2.3)),
                base_sigma=float(a.get("base_sigma", 0.5)),
                uplift=float(a.get("uplift", 1.0)),
                partners=_partners(a.get("partners")),
            )
            for a in d.get("advertisers", [])
        )
        cfg = SimConfig(
            seed=int(d.get("seed", 0) if seed is None else seed),
            personas=persona_specs,
            advertisers=advertisers,
            regimes=tuple(Regime(r) for r in d.get("regimes", ["GDPR", "CCPA"])),
            mechanisms=tuple(Mechanism(m) for m in d.get("mechanisms", ["OneTrust", "CookieBot", "NAI"])),
            bids_per_visit=int(d.get("bids_per_visit", 50)),
            iterations=int(d.get("iterations", 3)),
            sites_per_mechanism=int(d.get("sites_per_mechanism", 6)),
            site_presence=float(d.get("site_presence", 0.6)),
            category_coverage=float(d.get("category_coverage", 0.75)),
            category_site_presence=float(d.get("category_site_presence", 0.1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid scenario: {exc}") from None
    cfg.validate()
    return cfg


def load_scenario(source, seed: Optional[int] = None) -> SimConfig:
    """Load a scenario from a path or YAML text."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text("utf-8")
    else:
        text = source
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"scenario is not valid YAML: {exc}") from None
    return scenario_from_dict(doc, seed)


def bundled_scenario(name: str, seed: Optional[int] = None) -> SimConfig:
    text = resources.files("consent_audit").joinpath(f"data/{name}.scn").read_text("utf-8")
    return load_scenario(text, seed)


def reference_scenario(seed: Optional[int] = None) -> SimConfig:
    return bundled_scenario("reference", seed)


def all_compliant_scenario(seed: Optional[int] = None) -> SimConfig:
    return bundled_scenario("all_compliant", seed)


def leaked_to_json(leaked: Mapping[str, Iterable[str]], run_id: Optional[str] = None) -> str:
    doc = {"run_id": run_id, "leaked": {p: sorted(v) for p, v in sorted(leaked.items())}}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def leaked_from_json(text: str) -> tuple[dict[str, frozenset], Optional[str]]:
    doc = json.loads(text)
    if not isinstance(doc, dict) or not isinstance(doc.get("leaked"), dict):
        raise ValueError("leaked-set file must hold an object with a 'leaked' mapping")
    leaked = {p: frozenset(v) for p, v in doc["leaked"].items()}
    unknown = sorted(set(leaked) - set(PERSONAS))
    if unknown:
        raise ValueError(f"leaked-set file names unknown persona {unknown[0]!r}")
    if leaked.get(CONTROL):
        raise ValueError("control persona must have an empty leaked set")
    return leaked, doc.get("run_id")
