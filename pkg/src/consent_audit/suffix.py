"""Registrable-domain (eTLD+1) reduction against a vendored public-suffix snapshot.

The snapshot lives in ``data/public_suffix_list.dat`` and is never refreshed at
runtime, so ``registrable_domain`` is stable across runs and machines.
"""

from __future__ import annotations

import ipaddress
from functools import lru_cache
from importlib import resources
from typing import Optional
from urllib.parse import urlsplit


class SuffixRules:
    def __init__(self, lines):
        self.rules: set[str] = set()
        self.wildcards: set[str] = set()
        self.exceptions: set[str] = set()
        for raw in lines:
            line = raw.strip()
            if not line or line.startswith("//"):
                continue
            rule = line.split()[0].lower()
            if rule.startswith("!"):
                self.exceptions.add(rule[1:])
            elif rule.startswith("*."):
                self.wildcards.add(rule[2:])
            else:
                self.rules.add(rule)

    def suffix_length(self, labels: list[str]) -> int:
        """Number of trailing labels forming the public suffix of ``labels``."""
        best = 1  # implicit "*" rule
        for i in range(len(labels)):
            candidate = ".".join(labels[i:])
            n = len(labels) - i
            if candidate in self.exceptions:
                return n - 1
            if candidate in self.rules:
                best = max(best, n)
            if i > 0 and candidate in self.wildcards:
                best = max(best, n + 1)
        return best


@lru_cache(maxsize=1)
def default_rules() -> SuffixRules:
    text = resources.files("consent_audit").joinpath("data/public_suffix_list.dat").read_text("utf-8")
    return SuffixRules(text.splitlines())


def _to_unicode(label: str) -> str:
    if label.startswith("xn--"):
        try:
            return label[4:].encode("ascii").decode("punycode")
        except UnicodeError:
            return label
    return label


@lru_cache(maxsize=65536)
def registrable_domain(host: str) -> Optional[str]:
    """Return the eTLD+1 of ``host``, or None when host is itself a public suffix.

    >>> registrable_domain("ads.example.co.uk")
    'example.co.uk'
    """
    if not host:
        return None
    host = host.lower().rstrip(".")
    if host.startswith(".") or not host:
        return None
    labels = host.split(".")
    if any(not lab for lab in labels):
        return None
    n = default_rules().suffix_length([_to_unicode(lab) for lab in labels])
    if n >= len(labels):
        return None
    return ".".join(labels[-(n + 1):])


def party_of(url: str) -> str:
    """Registrable domain of an absolute URL; raises ValueError when there is none."""
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.hostname:
        raise ValueError(f"not an absolute http(s) URL: {url!r}")
    host = parts.hostname
    try:
        # IP literals have no eTLD+1; the address itself is the party.
        return str(ipaddress.ip_address(host))
    except ValueError:
        pass
    domain = registrable_domain(host)
    if domain is None:
        raise ValueError(f"host {host!r} has no registrable domain")
    return domain
