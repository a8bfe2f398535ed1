import json
import socket
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedblock.domain import DomainName
from fedblock.enrichment import (AssociatedDomains, DomainRecordBundle, Enricher, FixtureDnsClient,
                                 FixtureWhoisClient, JsonCache, MemoryCache, WhoisLog, build_bundle,
                                 fetch_associated, fetch_whois, write_fixture)
from fedblock.errors import ChainTooDeep, NotFound

T = DomainName.parse("t.example")


def write_whois(root, domain, lines):
    (root / "whois").mkdir(parents=True, exist_ok=True)
    (root / "whois" / f"{domain}.txt").write_text("\n".join(lines) + "\n")


def write_dns(root, domain, cname=(), aaaa=()):
    (root / "dns").mkdir(parents=True, exist_ok=True)
    (root / "dns" / f"{domain}.json").write_text(json.dumps({"cname": list(cname), "aaaa_owners": list(aaaa)}))


class TestFetchWhois:
    def test_fixture_lines_in_order(self, tmp_path):
        lines = [f"Field {i}: value {i}" for i in range(12)]
        write_whois(tmp_path, T, lines)
        log = fetch_whois(T, FixtureWhoisClient(tmp_path), MemoryCache())
        assert log.lines == lines

    def test_second_call_hits_cache(self, tmp_path):
        write_whois(tmp_path, T, ["Registrar: X"])
        client = FixtureWhoisClient(tmp_path)
        cache = JsonCache(tmp_path / "cache")
        first = fetch_whois(T, client, cache)
        second = fetch_whois(T, client, cache)
        assert first == second and client.calls == 1

    @given(st.integers(1, 6))
    def test_n_calls_equal_one_call(self, n):
        cache = MemoryCache()

        class Counting:
            calls = 0

            def lookup(self, d):
                Counting.calls += 1
                return ["a", "b"]

        outs = [fetch_whois(T, Counting(), cache) for _ in range(n)]
        assert Counting.calls == 1 and all(o == outs[0] for o in outs)

    def test_missing_fixture(self, tmp_path):
        with pytest.raises(NotFound):
            fetch_whois(DomainName.parse("x.example"), FixtureWhoisClient(tmp_path), MemoryCache())


class TestFetchAssociated:
    def test_cname_chain_of_one(self, tmp_path):
        write_dns(tmp_path, T, cname=["cdn.host.net"])
        got = fetch_associated(T, FixtureDnsClient(tmp_path), MemoryCache())
        assert {str(n) for n in got.names} == {"t.example", "cdn.host.net"}

    def test_no_records_gives_target_only(self, tmp_path):
        write_dns(tmp_path, T)
        got = fetch_associated(T, FixtureDnsClient(tmp_path), MemoryCache())
        assert got.names == {T}

    def test_cname_loop_is_too_deep(self, tmp_path):
        write_dns(tmp_path, "a.example", cname=["b.example"])
        write_dns(tmp_path, "b.example", cname=["a.example"])
        with pytest.raises(ChainTooDeep):
            fetch_associated(DomainName.parse("a.example"), FixtureDnsClient(tmp_path), MemoryCache(), 8)

    def test_chain_within_depth_is_followed(self, tmp_path):
        hops = [f"h{i}.example" for i in range(5)]
        for a, b in zip(hops, hops[1:]):
            write_dns(tmp_path, a, cname=[b], aaaa=[])
        write_dns(tmp_path, hops[-1], aaaa=["v6.example"])
        got = fetch_associated(DomainName.parse(hops[0]), FixtureDnsClient(tmp_path), MemoryCache(), 8)
        assert {str(n) for n in got.names} == set(hops) | {"v6.example"}
        with pytest.raises(ChainTooDeep):
            fetch_associated(DomainName.parse(hops[0]), FixtureDnsClient(tmp_path), MemoryCache(), 3)

    def test_missing_target_fixture(self, tmp_path):
        with pytest.raises(NotFound):
            fetch_associated(T, FixtureDnsClient(tmp_path), MemoryCache())

    @given(st.lists(st.from_regex(r"[a-z]{1,8}\.(com|net)", fullmatch=True), max_size=6),
           st.lists(st.from_regex(r"[a-z]{1,8}\.org", fullmatch=True), max_size=6))
    def test_target_always_present(self, cnames, owners):
        cache = MemoryCache()

        class Dns:
            def records(self, name):
                if name == T:
                    return {"cname": cnames, "aaaa_owners": owners}
                raise NotFound(str(name))

        got = fetch_associated(T, Dns(), cache)
        assert T in got.names
        assert got.names == {T} | {DomainName.parse(n) for n in cnames + owners}


class TestBundle:
    def test_target_inserted(self):
        b = build_bundle("t.example", WhoisLog(["x"]), AssociatedDomains(frozenset({"cdn.host.net"})))
        assert T in b.assoc.names

    def test_blank_whois_still_builds(self):
        b = build_bundle("t.example", WhoisLog([]), AssociatedDomains(frozenset()))
        assert b.whois.lines == [] and b.assoc.names == {T}

    def test_roundtrip(self):
        b = build_bundle("t.example", WhoisLog(["a", "b"], 12.5), AssociatedDomains(frozenset({"c.d"})))
        assert DomainRecordBundle.from_dict(json.loads(json.dumps(b.to_dict()))) == b

    def test_write_fixture_roundtrip(self, tmp_path):
        b = build_bundle("t.example", WhoisLog(["Registrar: R", "Creation Date: 2020-01-01"]),
                         AssociatedDomains(frozenset({"cdn.host.net", "v6.host.net"})))
        write_fixture(tmp_path, b)
        assert Enricher.from_fixtures(tmp_path).bundle("t.example") == b

    def test_missing_dns_fixture_falls_back_to_target(self, tmp_path):
        write_whois(tmp_path, T, ["Registrar: R"])
        assert Enricher.from_fixtures(tmp_path).bundle(T).assoc.names == {T}


def test_fixture_mode_opens_no_sockets(tmp_path, monkeypatch):
    write_whois(tmp_path, T, ["Registrar: R"])
    write_dns(tmp_path, T, cname=["cdn.host.net"])

    def forbidden(*a, **k):
        raise AssertionError("socket opened in fixture mode")

    monkeypatch.setattr(socket, "socket", forbidden)
    monkeypatch.setattr(socket, "create_connection", forbidden)
    b1 = Enricher.from_fixtures(tmp_path).bundle(T)
    b2 = Enricher.from_fixtures(tmp_path).bundle(T)
    assert b1 == b2


def test_json_cache_concurrent_writers_leave_valid_entries(tmp_path):
    cache = JsonCache(tmp_path)

    def writer(i):
        for j in range(50):
            cache.put("whois", "k", {"lines": [str(i)] * (j + 1), "fetched_at": 0.0})

    threads = [threading.Thread(target=writer, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    value = cache.get("whois", "k")
    assert len(set(value["lines"])) == 1
    assert not list((tmp_path / "whois").glob(".tmp-*"))


def test_json_cache_ttl_expires(tmp_path):
    cache = JsonCache(tmp_path, ttl=-1.0)
    cache.put("whois", "k", {"lines": []})
    assert cache.get("whois", "k") is None
