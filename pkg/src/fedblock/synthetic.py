"""Parameterized synthetic domain records for offline experiments.

Two label families (0 = malicious, 1 = benign) differ in whois fields
(registration age, countries, EPP status, registrar, name servers) and in
domain-token vocabulary (dictionary words vs. random letter strings). Each
family is split into ``n_subfamilies`` groups with their own registrar,
name-server host and vocabulary, so a model only learns a subfamily from
examples of it.

``generic_strength`` is the probability that a record's class-wide fields
(dates, countries, EPP codes) follow its class; otherwise they are drawn
class-agnostically. ``field_noise`` swaps individual fields to the other
class's distribution.
"""
from __future__ import annotations

import datetime as dt
import json
import string
from dataclasses import dataclass

import numpy as np

from .baseline import load_wordlist
from .enrichment import AssociatedDomains, DomainRecordBundle, WhoisLog

_MAL_COUNTRIES = ("PA", "RU", "CN", "BZ", "SC", "VG")
_BEN_COUNTRIES = ("US", "DE", "GB", "FR", "CA", "NL", "JP")
_MAL_EPP = ("clientHold", "pendingDelete", "serverHold", "ok", "inactive")
_BEN_EPP = ("clientTransferProhibited", "clientDeleteProhibited", "clientUpdateProhibited",
            "serverTransferProhibited", "serverDeleteProhibited")
_TLDS = ("com", "net", "org", "io", "info", "xyz", "top", "co")


@dataclass
class _Subfamily:
    label: int
    registrar: str
    ns_host: str
    vocab: list
    cdn: str


def _random_word(rng, lo=5, hi=10):
    n = int(rng.integers(lo, hi + 1))
    return "".join(rng.choice(list(string.ascii_lowercase), size=n))


def _subfamilies(rng, n_subfamilies, words):
    fams = []
    words = sorted(words)
    for label in (0, 1):
        for _ in range(n_subfamilies):
            if label == 1:
                vocab = [words[i] for i in rng.choice(len(words), size=12, replace=False)]
            else:
                vocab = [_random_word(rng) for _ in range(12)]
            fams.append(_Subfamily(
                label=label,
                registrar=f"{_random_word(rng, 6, 9).capitalize()} Registrar LLC",
                ns_host=_random_word(rng, 5, 8),
                vocab=vocab,
                cdn=_random_word(rng, 4, 7),
            ))
    return fams


def _date(rng, start_year, end_year):
    start = dt.date(start_year, 1, 1).toordinal()
    end = dt.date(end_year, 12, 28).toordinal()
    return dt.date.fromordinal(int(rng.integers(start, end)))


def _record(rng, fam: _Subfamily, generic_strength, field_noise):
    cls = fam.label if rng.random() < generic_strength else int(rng.integers(0, 2))

    def side():
        return 1 - cls if rng.random() < field_noise else cls

    tld = _TLDS[int(rng.integers(len(_TLDS)))]
    tokens = [fam.vocab[i] for i in rng.choice(len(fam.vocab), size=2, replace=False)]
    domain = f"{tokens[0]}.{tokens[1]}.{tld}" if rng.random() < 0.5 else f"{tokens[0]}{tokens[1]}.{tld}"
    created = _date(rng, 2019, 2022) if side() == 0 else _date(rng, 1996, 2012)
    expires = created + dt.timedelta(days=365 * int(rng.integers(1, 3) if side() == 0 else rng.integers(5, 12)))
    countries = _MAL_COUNTRIES if side() == 0 else _BEN_COUNTRIES
    country = countries[int(rng.integers(len(countries)))]
    epp_pool = _MAL_EPP if side() == 0 else _BEN_EPP
    statuses = sorted({epp_pool[int(i)] for i in rng.choice(len(epp_pool), size=2)})
    lines = [
        f"Domain Name: {domain.upper()}",
        f"Registrar: {fam.registrar}",
        f"Creation Date: {created.isoformat()}T{int(rng.integers(24)):02d}:00:00Z",
        f"Registry Expiry Date: {expires.isoformat()}T00:00:00Z",
        f"Registrant Country: {country}",
        f"Admin Country: {country}",
        f"Tech Country: {countries[int(rng.integers(len(countries)))]}",
    ]
    lines += [f"Domain Status: {s} https://icann.org/epp#{s}" for s in statuses]
    lines += [f"Name Server: ns{i}.{fam.ns_host}.net" for i in (1, 2)]
    assoc = {domain}
    if rng.random() < 0.7:
        assoc.add(f"{fam.vocab[int(rng.integers(len(fam.vocab)))]}.{fam.cdn}.net")
    return DomainRecordBundle(domain, WhoisLog(lines), AssociatedDomains(frozenset(assoc)))


def make_synthetic_bundles(n, seed=0, n_subfamilies=1, generic_strength=1.0, field_noise=0.15,
                           wordlist=None):
    """Generate ``n`` records, half per label, with distinct domain names.

    Returns ``(bundles, labels, subfamily_ids)``.
    """
    rng = np.random.default_rng(seed)
    words = [w for w in (wordlist or load_wordlist()) if 4 <= len(w) <= 9]
    fams = _subfamilies(rng, n_subfamilies, words)
    bundles, labels, groups = [], [], []
    seen = set()
    i = 0
    while len(bundles) < n:
        label = i % 2
        i += 1
        g = label * n_subfamilies + int(rng.integers(n_subfamilies))
        b = _record(rng, fams[g], generic_strength, field_noise)
        if b.domain in seen:
            continue
        seen.add(b.domain)
        bundles.append(b)
        labels.append(label)
        groups.append(g)
    return bundles, np.asarray(labels), np.asarray(groups)


_LIST_STYLES = (
    ("Smart Home IoT Trackers", "Non-localhost hosts (IPv4)", "hosts"),
    ("Mobile Ads Blocklist", "Domains", "domains"),
    ("Router Malware Feed", "Adblock Plus", "adblock"),
    ("Android Tracker Domains", "dnsmasq domains list", "dnsmasq"),
)


def _format_rule(domain: str, style: str) -> str:
    if style == "hosts":
        return f"0.0.0.0 {domain}"
    if style == "adblock":
        return f"||{domain}^"
    if style == "dnsmasq":
        return f"address=/{domain}/0.0.0.0"
    return domain


def write_synthetic_workspace(root, bundles, labels, block_list_size=250):
    """Write fixtures, filter lists and a list manifest for the given records.

    Malicious records are spread over block lists of at most
    ``block_list_size`` entries, cycling through the supported grammars;
    benign records go into one allow list. Returns the manifest path.
    """
    from pathlib import Path

    from .enrichment import write_fixture

    root = Path(root)
    (root / "lists").mkdir(parents=True, exist_ok=True)
    for b in bundles:
        write_fixture(root / "fixtures", b)
    bad = [str(b.domain) for b, y in zip(bundles, labels) if y == 0]
    good = [str(b.domain) for b, y in zip(bundles, labels) if y == 1]
    entries = []
    for i in range(0, len(bad), block_list_size):
        title, syntax, style = _LIST_STYLES[(i // block_list_size) % len(_LIST_STYLES)]
        name = f"block{i // block_list_size:02d}.txt"
        body = [f"# {title}"] + [_format_rule(d, style) for d in bad[i:i + block_list_size]]
        (root / "lists" / name).write_text("\n".join(body) + "\n", encoding="utf-8")
        entries.append({"id": name[:-4], "path": f"lists/{name}", "title": f"{title} {i // block_list_size}",
                        "syntax": syntax, "software": ["Pi-hole"], "tags": ["malware"], "role": "block"})
    (root / "lists" / "allow.txt").write_text("\n".join(good) + "\n", encoding="utf-8")
    entries.append({"id": "allow", "path": "lists/allow.txt", "title": "Home network allow list",
                    "syntax": "Domains For allow listing", "role": "allow"})
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"lists": entries}, indent=1) + "\n", encoding="utf-8")
    return manifest
