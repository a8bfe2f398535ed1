"""Whois and DNS enrichment with an on-disk cache and offline fixtures.

Fixture layout::

    fixtures/whois/<domain>.txt   raw whois lines
    fixtures/dns/<domain>.json    {"cname": [...], "aaaa_owners": [...]}
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
import time
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

from .domain import DomainName, try_parse
from .errors import ChainTooDeep, NotFound
from .seeding import sha256_hex

logger = logging.getLogger(__name__)

DEFAULT_CHAIN_DEPTH = 8
DEFAULT_LIVE_TTL = 7 * 24 * 3600.0


@dataclass
class WhoisLog:
    lines: list[str]
    fetched_at: float = 0.0


@dataclass
class AssociatedDomains:
    names: frozenset

    def __post_init__(self):
        self.names = frozenset(DomainName.parse(n) for n in self.names)


@dataclass
class DomainRecordBundle:
    domain: DomainName
    whois: WhoisLog
    assoc: AssociatedDomains = field(default_factory=lambda: AssociatedDomains(frozenset()))

    def __post_init__(self):
        self.domain = DomainName.parse(self.domain)
        if self.domain not in self.assoc.names:
            self.assoc = AssociatedDomains(self.assoc.names | {self.domain})

    def to_dict(self) -> dict:
        return {
            "domain": str(self.domain),
            "whois": list(self.whois.lines),
            "fetched_at": self.whois.fetched_at,
            "assoc": sorted(str(n) for n in self.assoc.names),
        }

    @classmethod
    def from_dict(cls, data: dict) -> DomainRecordBundle:
        return cls(
            DomainName.parse(data["domain"]),
            WhoisLog(list(data["whois"]), float(data.get("fetched_at", 0.0))),
            AssociatedDomains(frozenset(data.get("assoc", []))),
        )


def build_bundle(domain, whois: WhoisLog, assoc: AssociatedDomains) -> DomainRecordBundle:
    return DomainRecordBundle(DomainName.parse(domain), whois, assoc)


# ---------------------------------------------------------------- cache

class JsonCache:
    """Content-addressed JSON store, one file per (kind, key).

    Writes go to a temp file in the target directory and are renamed into
    place, so concurrent readers never see a partial entry. ``ttl=None``
    means entries never expire.
    """

    def __init__(self, root, ttl: float | None = None):
        self.root = Path(root)
        self.ttl = ttl

    def _path(self, kind: str, key: str) -> Path:
        return self.root / kind / f"{sha256_hex(key)}.json"

    def get(self, kind: str, key: str):
        path = self._path(kind, key)
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError):
            return None
        if self.ttl is not None and time.time() - entry.get("stored_at", 0.0) > self.ttl:
            return None
        return entry["value"]

    def put(self, kind: str, key: str, value) -> None:
        path = self._path(kind, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps({"key": key, "stored_at": time.time(), "value": value})
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise


class MemoryCache:
    def __init__(self):
        self._data = {}
        self._lock = threading.Lock()

    def get(self, kind, key):
        with self._lock:
            return self._data.get((kind, key))

    def put(self, kind, key, value):
        with self._lock:
            self._data[(kind, key)] = value


# ---------------------------------------------------------------- clients

class TokenBucket:
    def __init__(self, rate: float = 0.5, burst: int = 1):
        self.rate = rate
        self.capacity = burst
        self._tokens = float(burst)
        self._last = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self):
        with self._lock:
            while True:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                time.sleep((1 - self._tokens) / self.rate)


class FixtureWhoisClient:
    live = False

    def __init__(self, root):
        self.root = Path(root)
        self.calls = 0

    def lookup(self, domain: DomainName) -> list[str]:
        self.calls += 1
        path = self.root / "whois" / f"{domain}.txt"
        try:
            return path.read_text(encoding="utf-8", errors="replace").splitlines()
        except FileNotFoundError:
            raise NotFound(f"no whois fixture for {domain}") from None


class LiveWhoisClient:
    """HTTP whois lookup: ``GET {endpoint}?domain=<name>`` returning raw text.

    The API key is read from the environment variable named by
    ``api_key_env`` and sent as a bearer token.
    """

    live = True

    def __init__(self, endpoint: str, api_key_env: str = "FEDBLOCK_WHOIS_KEY",
                 timeout: float = 10.0, rate: float = 0.5):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.bucket = TokenBucket(rate)
        self.calls = 0

    def lookup(self, domain: DomainName) -> list[str]:
        self.bucket.acquire()
        self.calls += 1
        url = f"{self.endpoint}?{urllib.parse.urlencode({'domain': str(domain)})}"
        req = urllib.request.Request(url)
        key = os.environ.get(self.api_key_env)
        if key:
            req.add_header("Authorization", f"Bearer {key}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read().decode("utf-8", errors="replace")
        except OSError as exc:
            raise NotFound(f"whois lookup failed for {domain}: {exc}") from exc
        return body.splitlines()


class FixtureDnsClient:
    live = False

    def __init__(self, root):
        self.root = Path(root)
        self.calls = 0

    def records(self, name: DomainName) -> dict:
        self.calls += 1
        path = self.root / "dns" / f"{name}.json"
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise NotFound(f"no dns fixture for {name}") from None
        return {"cname": list(data.get("cname", [])), "aaaa_owners": list(data.get("aaaa_owners", []))}


class LiveDnsClient:
    """Query a recursive resolver for CNAME and AAAA records over UDP."""

    live = True

    def __init__(self, resolver: str = "1.1.1.1", port: int = 53, timeout: float = 3.0):
        self.resolver = resolver
        self.port = port
        self.timeout = timeout
        self.calls = 0

    def records(self, name: DomainName) -> dict:
        from dnslib import QTYPE, DNSRecord

        self.calls += 1
        out = {"cname": [], "aaaa_owners": []}
        try:
            reply = DNSRecord.parse(DNSRecord.question(str(name), "AAAA").send(
                self.resolver, self.port, timeout=self.timeout))
        except OSError as exc:
            raise NotFound(f"dns lookup failed for {name}: {exc}") from exc
        for rr in reply.rr:
            if rr.rtype == QTYPE.CNAME and str(rr.rname).rstrip(".").lower() == str(name):
                out["cname"].append(str(rr.rdata.label).rstrip("."))
            elif rr.rtype == QTYPE.AAAA:
                out["aaaa_owners"].append(str(rr.rname).rstrip("."))
        return out


# ---------------------------------------------------------------- fetchers

def fetch_whois(domain, client, cache) -> WhoisLog:
    domain = DomainName.parse(domain)
    hit = cache.get("whois", str(domain))
    if hit is not None:
        return WhoisLog(list(hit["lines"]), hit["fetched_at"])
    lines = client.lookup(domain)
    log = WhoisLog(list(lines), time.time() if getattr(client, "live", False) else 0.0)
    cache.put("whois", str(domain), {"lines": log.lines, "fetched_at": log.fetched_at})
    return log


def fetch_associated(domain, client, cache, max_depth: int = DEFAULT_CHAIN_DEPTH) -> AssociatedDomains:
    """Collect the target, its CNAME chain and AAAA owner names.

    Chains are followed hop by hop; a chain longer than ``max_depth`` (which
    includes any CNAME loop) raises ``ChainTooDeep``. Intermediate names
    without records end the chain.
    """
    domain = DomainName.parse(domain)
    hit = cache.get("assoc", str(domain))
    if hit is not None:
        return AssociatedDomains(frozenset(hit))

    names = {domain}
    frontier = [(domain, 0)]
    first = True
    while frontier:
        name, depth = frontier.pop()
        try:
            rec = client.records(name)
        except NotFound:
            if first:
                raise
            continue
        first = False
        for owner in rec["aaaa_owners"]:
            parsed = try_parse(owner)
            if parsed is not None:
                names.add(parsed)
        for target in rec["cname"]:
            parsed = try_parse(target)
            if parsed is None:
                continue
            if depth + 1 > max_depth:
                raise ChainTooDeep(f"CNAME chain from {domain} exceeds {max_depth} hops")
            names.add(parsed)
            frontier.append((parsed, depth + 1))
    result = AssociatedDomains(frozenset(names))
    cache.put("assoc", str(domain), sorted(str(n) for n in result.names))
    return result


class Enricher:
    """Bundle builder over a whois client, a DNS client and a shared cache."""

    def __init__(self, whois_client, dns_client, cache=None, max_depth: int = DEFAULT_CHAIN_DEPTH):
        self.whois_client = whois_client
        self.dns_client = dns_client
        self.cache = cache if cache is not None else MemoryCache()
        self.max_depth = max_depth

    @classmethod
    def from_fixtures(cls, root, cache=None):
        return cls(FixtureWhoisClient(root), FixtureDnsClient(root), cache)

    def bundle(self, domain) -> DomainRecordBundle:
        domain = DomainName.parse(domain)
        whois = fetch_whois(domain, self.whois_client, self.cache)
        try:
            assoc = fetch_associated(domain, self.dns_client, self.cache, self.max_depth)
        except NotFound:
            # no DNS data is not fatal: the target alone still forms a domain set
            assoc = AssociatedDomains(frozenset({domain}))
        return build_bundle(domain, whois, assoc)


def write_fixture(root, bundle: DomainRecordBundle, cname=(), aaaa_owners=()) -> None:
    """Write one bundle in fixture layout (used by tests and the demo generator)."""
    root = Path(root)
    (root / "whois").mkdir(parents=True, exist_ok=True)
    (root / "dns").mkdir(parents=True, exist_ok=True)
    (root / "whois" / f"{bundle.domain}.txt").write_text("\n".join(bundle.whois.lines) + ("\n" if bundle.whois.lines else ""), encoding="utf-8")
    if not cname and not aaaa_owners:
        aaaa_owners = sorted(str(n) for n in bundle.assoc.names if n != bundle.domain)
    (root / "dns" / f"{bundle.domain}.json").write_text(
        json.dumps({"cname": list(cname), "aaaa_owners": list(aaaa_owners)}), encoding="utf-8")
