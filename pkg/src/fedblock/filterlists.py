"""Filter-list ingestion: categorization, gating, rule parsing, corpus assembly.

Supported grammars (``syntax_tag`` values are matched case-insensitively,
either by grammar name or by the filterlists.com syntax name):

* ``hosts``     -- ``0.0.0.0 ads.example.com`` (IPv4, IPv6 or bare ``0`` prefix)
* ``domains``   -- one bare domain per line, ``*.`` wildcard prefix allowed
* ``adblock``   -- ``||ads.example.com^``, ``@@||ok.example.com^``
* ``dnsmasq``   -- ``address=/ads.example.com/0.0.0.0``, ``server=/x.com/``
* ``allowlist`` -- bare domains that are exemptions (``Domains For allow listing``)

Comment lines (``#``, ``!``) are recognized in every grammar. Syntaxes that
are accepted by the gate but have no grammar here (Unbound, BIND, RPZ,
Privoxy action files, Pi-hole RegEx, ...) fall back to auto-detection, which
will classify most of their lines as ``Invalid``.
"""
from __future__ import annotations

import enum
import ipaddress
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import DomainName, try_parse
from .errors import EmptyCorpus
from .seeding import derive_seed

logger = logging.getLogger(__name__)

IOT_KEYWORDS = frozenset({
    "internet of things", "internet-of-things", "iot", "i.o.t", "home", "pi-hole",
    "pihole", "dns", "server", "smart", "network", "router", "gateway", "protocol",
})
MOBILE_KEYWORDS = frozenset({"ios", "android", "mobile", "phone"})

ALLOWED_SOFTWARE = frozenset({
    "AdGuard (free versions)", "DNS66", "Adblock", "AdAway", "Pi-hole", "FireHOL",
    "Samsung Knox", "Privoxy", "Diversion", "dnsmasq", "Blokada", "personalDNSfilter",
    "Unbound", "BIND", "AdGuard Home", "pfBlockerNG", "Opera's built-in adblocker",
    "Surge", "dnscrypt-proxy", "SmartDNS", "AdGuard for Android",
    "Vivaldi's Privacy settings",
})
ALLOWED_SYNTAX = frozenset({
    "Non-localhost hosts (IPv4)", "uBlock Origin Static", "Domains", "Unbound", "BIND",
    "Socks5", "Hosts (0)", "Hosts (localhost IPv4)", "Privoxy action file",
    "Adblocker-syntax domains", "Adblocker-syntax domains w/o ABP tag",
    "AdGuard Superadvanced onlys", "Adblock Plus", "SmartDNS", "$important/$empty only",
    "AdGuard", "Domains with ABP tags", "dnsmasq domains list", "Adblock Plus Advanceds",
    "Pi-hole RegEx", "Non-localhost hosts (IPv6)", "DNS servers",
    "Response Policy Zones (RPZ)", "Domains with wildcards",
})
ALLOWED_BLOCK_TAGS = frozenset({"crypto miners", "ads", "trackers", "malware", "privacy"})

# filterlists.com syntax name -> grammar
SYNTAX_GRAMMAR = {
    "hosts": "hosts",
    "hosts (0)": "hosts",
    "hosts (localhost ipv4)": "hosts",
    "non-localhost hosts (ipv4)": "hosts",
    "non-localhost hosts (ipv6)": "hosts",
    "domains": "domains",
    "domains with wildcards": "domains",
    "adblock": "adblock",
    "adblock plus": "adblock",
    "ublock origin static": "adblock",
    "adguard": "adblock",
    "adblocker-syntax domains": "adblock",
    "adblocker-syntax domains w/o abp tag": "adblock",
    "domains with abp tags": "adblock",
    "dnsmasq": "dnsmasq",
    "dnsmasq domains list": "dnsmasq",
    "allowlist": "allowlist",
    "domains for allow listing": "allowlist",
}


class ListCategory(str, enum.Enum):
    IOT = "IoT"
    MOBILE = "Mobile"
    REJECTED = "Rejected"


class RuleKind(str, enum.Enum):
    DOMAIN_BLOCK = "DomainBlock"
    DOMAIN_ALLOW = "DomainAllow"
    ELEMENT_OR_OPTION = "ElementOrOption"
    COMMENT = "Comment"
    INVALID = "Invalid"


@dataclass
class FilterListMeta:
    title: str
    description: str = ""
    syntax_tag: str = "Domains"
    software_tags: list[str] = field(default_factory=list)
    block_category_tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.title or not self.title.strip():
            raise ValueError("filter list title must be non-empty")


@dataclass(frozen=True)
class FilterRule:
    raw: str
    kind: RuleKind
    domain: DomainName | None = None

    def __post_init__(self):
        needs_domain = self.kind in (RuleKind.DOMAIN_BLOCK, RuleKind.DOMAIN_ALLOW)
        if needs_domain != (self.domain is not None):
            raise ValueError(f"{self.kind.value} rule must {'' if needs_domain else 'not '}carry a domain")


@dataclass
class FilterList:
    list_id: str
    meta: FilterListMeta
    lines: list[str]
    role: str = "block"


@dataclass
class Corpus:
    entries: list[tuple[DomainName, int, str]]
    conflicts: list[DomainName] = field(default_factory=list)

    def counts(self) -> dict[int, int]:
        out = {0: 0, 1: 0}
        for _, label, _ in self.entries:
            out[label] += 1
        return out

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"domain": str(d), "label": label, "source": src}) + "\n"
            for d, label, src in self.entries
        )

    @classmethod
    def from_jsonl(cls, text: str) -> Corpus:
        entries = []
        for line in text.splitlines():
            if line.strip():
                row = json.loads(line)
                entries.append((DomainName.parse(row["domain"]), int(row["label"]), row.get("source", "")))
        return cls(entries)


# ---------------------------------------------------------------- categorize

def _keyword_pattern(keywords) -> re.Pattern:
    alts = sorted((re.escape(k.lower()) for k in keywords), key=len, reverse=True)
    return re.compile(r"(?<![a-z0-9])(?:" + "|".join(alts) + r")(?![a-z0-9])", re.IGNORECASE)


def categorize_list(meta: FilterListMeta, iot_keywords=IOT_KEYWORDS,
                    mobile_keywords=MOBILE_KEYWORDS) -> ListCategory:
    """Assign a list to IoT, Mobile or Rejected by keywords in title/description.

    Keywords only match at word boundaries, so ``home`` does not fire on
    ``homestead``. When both sets match, IoT wins and the collision is logged.
    """
    if not iot_keywords or not mobile_keywords:
        raise ValueError("keyword sets must be non-empty")
    text = f"{meta.title}\n{meta.description}"
    iot = _keyword_pattern(iot_keywords).search(text) is not None
    mobile = _keyword_pattern(mobile_keywords).search(text) is not None
    if iot and mobile:
        logger.info("list %r matches both IoT and Mobile keywords; using IoT", meta.title)
    if iot:
        return ListCategory.IOT
    if mobile:
        return ListCategory.MOBILE
    return ListCategory.REJECTED


def gate_list(meta: FilterListMeta, allowed_syntax=ALLOWED_SYNTAX,
              allowed_software=ALLOWED_SOFTWARE, allowed_block_tags=ALLOWED_BLOCK_TAGS) -> bool:
    def fold(values):
        return {v.strip().lower() for v in values}

    return (
        meta.syntax_tag.strip().lower() in fold(allowed_syntax)
        and bool(fold(meta.software_tags) & fold(allowed_software))
        and bool(fold(meta.block_category_tags) & fold(allowed_block_tags))
    )


# ---------------------------------------------------------------- parsing

_DOMAINISH = re.compile(r"^[A-Za-z0-9_*.-]+$")


_COSMETIC = ("##", "#@#", "#?#", "#$#", "#%#")


def _comment(s: str) -> bool:
    return s.startswith(("#", "!")) or (s.startswith("[") and s.endswith("]"))


def _domain_rule(raw: str, token: str, kind: RuleKind) -> FilterRule:
    token = token.strip().rstrip(".")
    if token.startswith("*."):
        token = token[2:]
    elif token.startswith("."):
        token = token[1:]
    if not token or not _DOMAINISH.match(token) or _is_ip(token):
        return FilterRule(raw, RuleKind.INVALID)
    if "*" in token:
        return FilterRule(raw, RuleKind.ELEMENT_OR_OPTION)
    domain = try_parse(token)
    if domain is None:
        return FilterRule(raw, RuleKind.INVALID)
    return FilterRule(raw, kind, domain)


def _is_ip(token: str) -> bool:
    if token == "0":
        return True
    try:
        ipaddress.ip_address(token.split("%")[0])
    except ValueError:
        return False
    return True


def _hosts_names(body: str) -> list[str] | None:
    parts = body.split()
    if len(parts) < 2 or not _is_ip(parts[0]):
        return None
    return parts[1:]


def _parse_hosts(raw, body):
    names = _hosts_names(body)
    if names is None:
        return FilterRule(raw, RuleKind.INVALID)
    return _domain_rule(raw, names[0], RuleKind.DOMAIN_BLOCK)


def _parse_plain(raw, body, kind=RuleKind.DOMAIN_BLOCK):
    if len(body.split()) != 1:
        return FilterRule(raw, RuleKind.INVALID)
    if any(c in body for c in "/$^|?=:"):
        return FilterRule(raw, RuleKind.ELEMENT_OR_OPTION)
    return _domain_rule(raw, body, kind)


def _parse_adblock(raw, body):
    if any(sep in body for sep in _COSMETIC):
        return FilterRule(raw, RuleKind.ELEMENT_OR_OPTION)
    kind = RuleKind.DOMAIN_BLOCK
    if body.startswith("@@"):
        kind = RuleKind.DOMAIN_ALLOW
        body = body[2:]
    if "$" in body:
        return FilterRule(raw, RuleKind.ELEMENT_OR_OPTION)
    if body.startswith("/") and body.endswith("/") and len(body) > 1:
        return FilterRule(raw, RuleKind.ELEMENT_OR_OPTION)
    if body.startswith("||"):
        core = body[2:]
        if core.endswith("^|"):
            core = core[:-2]
        elif core.endswith("^"):
            core = core[:-1]
        if any(c in core for c in "/^|?:="):
            return FilterRule(raw, RuleKind.ELEMENT_OR_OPTION)
        return _domain_rule(raw, core, kind)
    if body.startswith("|") or any(c in body for c in "/^?="):
        return FilterRule(raw, RuleKind.ELEMENT_OR_OPTION)
    if len(body.split()) != 1:
        return FilterRule(raw, RuleKind.INVALID)
    return _domain_rule(raw, body, kind)


_DNSMASQ_RE = re.compile(r"^(address|server|local)=/([^/]+)/(.*)$")
_SINKHOLE_TARGETS = {"", "#", "0.0.0.0", "::", "127.0.0.1", "::1"}


def _parse_dnsmasq(raw, body):
    m = _DNSMASQ_RE.match(body)
    if not m:
        return FilterRule(raw, RuleKind.INVALID)
    directive, name, target = m.groups()
    target = target.strip()
    if directive == "address" and target not in _SINKHOLE_TARGETS:
        # redirect to a real address: not a block rule
        return FilterRule(raw, RuleKind.ELEMENT_OR_OPTION)
    if directive == "server" and target not in ("", "#"):
        return FilterRule(raw, RuleKind.ELEMENT_OR_OPTION)
    return _domain_rule(raw, name, RuleKind.DOMAIN_BLOCK)


def _parse_auto(raw, body):
    if body.startswith(("||", "@@")) or "##" in body:
        return _parse_adblock(raw, body)
    if _DNSMASQ_RE.match(body):
        return _parse_dnsmasq(raw, body)
    if _hosts_names(body) is not None:
        return _parse_hosts(raw, body)
    return _parse_plain(raw, body)


def grammar_for(syntax_tag: str) -> str:
    return SYNTAX_GRAMMAR.get(syntax_tag.strip().lower(), "auto")


def parse_rule(line: str, syntax_tag: str) -> FilterRule:
    """Classify one filter-list line. Total: never raises."""
    raw = line
    try:
        body = line.strip().lstrip("﻿")
        grammar = grammar_for(syntax_tag)
        if grammar in ("adblock", "auto") and body.startswith(_COSMETIC):
            # generic cosmetic rules such as "##.ad" look like comments
            return FilterRule(raw, RuleKind.ELEMENT_OR_OPTION)
        if not body or _comment(body):
            return FilterRule(raw, RuleKind.COMMENT)
        if grammar in ("hosts", "domains", "allowlist"):
            # inline comments only make sense for the whitespace-separated grammars
            body = body.split("#", 1)[0].strip()
            if not body:
                return FilterRule(raw, RuleKind.COMMENT)
        if grammar == "hosts":
            return _parse_hosts(raw, body)
        if grammar == "domains":
            return _parse_plain(raw, body)
        if grammar == "allowlist":
            if body.startswith("@@"):
                return _parse_adblock(raw, body)
            return _parse_plain(raw, body, RuleKind.DOMAIN_ALLOW)
        if grammar == "adblock":
            return _parse_adblock(raw, body)
        if grammar == "dnsmasq":
            return _parse_dnsmasq(raw, body)
        return _parse_auto(raw, body)
    except Exception:  # pragma: no cover - defensive, parse_rule is total
        logger.debug("unparseable line %r", line, exc_info=True)
        return FilterRule(raw, RuleKind.INVALID)


def parse_list(lines, syntax_tag: str) -> list[FilterRule]:
    """Parse every line; hosts lines naming several hosts yield one rule each."""
    grammar = grammar_for(syntax_tag)
    rules = []
    for line in lines:
        rule = parse_rule(line, syntax_tag)
        rules.append(rule)
        if grammar == "hosts" and rule.kind is RuleKind.DOMAIN_BLOCK:
            names = _hosts_names(line.split("#", 1)[0].strip()) or []
            for extra in names[1:]:
                more = _domain_rule(line, extra, RuleKind.DOMAIN_BLOCK)
                if more.kind is RuleKind.DOMAIN_BLOCK:
                    rules.append(more)
    return rules


# ---------------------------------------------------------------- corpus

def downsample(domains, cap: int = 289, seed: int = 0) -> list:
    if cap < 1:
        raise ValueError("cap must be >= 1")
    domains = list(domains)
    if len(domains) <= cap:
        return domains
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(domains), size=cap, replace=False))
    return [domains[i] for i in keep]


def _unique(seq):
    seen = set()
    out = []
    for item in seq:
        if item not in seen:
            seen.add(item)
            out.append(item)
    return out


def build_corpus(block_lists, allow_lists, cap: int = 289, seed: int = 0) -> Corpus:
    """Merge parsed lists into a labeled corpus (0 = blocked, 1 = allowed).

    Block lists are downsampled per list; allow lists are taken whole. A
    domain that shows up with both labels is dropped from the corpus.
    """
    blocked: dict[DomainName, str] = {}
    for flist in block_lists:
        rules = parse_list(flist.lines, flist.meta.syntax_tag)
        names = _unique(r.domain for r in rules if r.kind is RuleKind.DOMAIN_BLOCK)
        for d in downsample(names, cap, derive_seed(seed, "downsample", flist.list_id)):
            blocked.setdefault(d, flist.list_id)

    allowed: dict[DomainName, str] = {}
    for flist in allow_lists:
        for r in parse_list(flist.lines, flist.meta.syntax_tag):
            if r.kind in (RuleKind.DOMAIN_ALLOW, RuleKind.DOMAIN_BLOCK):
                allowed.setdefault(r.domain, flist.list_id)

    conflicts = [d for d in blocked if d in allowed]
    for d in conflicts:
        logger.warning("dropping %s: present in block list %s and allow list %s",
                       d, blocked[d], allowed[d])
        del blocked[d]
        del allowed[d]

    entries = [(d, 0, src) for d, src in blocked.items()]
    entries += [(d, 1, src) for d, src in allowed.items()]
    corpus = Corpus(entries, conflicts)
    counts = corpus.counts()
    if counts[0] < 2 or counts[1] < 2:
        raise EmptyCorpus(f"need >= 2 entries per class, got label0={counts[0]} label1={counts[1]}")
    return corpus


def load_manifest(path) -> list[tuple[FilterList, str]]:
    """Read a JSON manifest of list files.

    Each entry: ``{"id", "path", "title", "description", "syntax", "software",
    "tags", "role"}``; ``path`` is relative to the manifest. Returns
    ``(FilterList, path)`` pairs; raises ``FileNotFoundError`` naming the
    first missing list file.
    """
    path = Path(path)
    spec = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(spec, dict):
        spec = spec["lists"]
    out = []
    for i, entry in enumerate(spec):
        list_path = (path.parent / entry["path"]).resolve()
        if not list_path.is_file():
            raise FileNotFoundError(f"filter list not found: {list_path}")
        meta = FilterListMeta(
            title=entry["title"],
            description=entry.get("description", ""),
            syntax_tag=entry.get("syntax", "Domains"),
            software_tags=list(entry.get("software", [])),
            block_category_tags=list(entry.get("tags", [])),
        )
        lines = list_path.read_text(encoding="utf-8", errors="replace").splitlines()
        role = entry.get("role", "block")
        if role not in ("block", "allow"):
            raise ValueError(f"manifest entry {i}: role must be 'block' or 'allow'")
        out.append((FilterList(entry.get("id", list_path.stem), meta, lines, role), str(list_path)))
    return out


def select_lists(lists):
    """Apply categorization and gating to block lists; allow lists pass through.

    Returns ``(block_lists, allow_lists, rejected)`` where ``rejected`` is a
    list of ``(list_id, reason)``.
    """
    blocks, allows, rejected = [], [], []
    for flist in lists:
        if flist.role == "allow":
            allows.append(flist)
            continue
        category = categorize_list(flist.meta)
        if category is ListCategory.REJECTED:
            rejected.append((flist.list_id, "no IoT/Mobile keyword"))
        elif not gate_list(flist.meta):
            rejected.append((flist.list_id, "syntax/software/tag gate"))
        else:
            blocks.append(flist)
    return blocks, allows, rejected
