"""UDP DNS proxy that answers blocked names locally and relays the rest.

Query handling runs on a thread per datagram. Decisions read an immutable
:class:`ModelSet` snapshot; :meth:`DnsProxy.swap_models` replaces it and
clears the verdict cache.
"""
from __future__ import annotations

import logging
import socket
import socketserver
import threading
from collections import Counter

from dnslib import AAAA, QTYPE, RCODE, RR, A, DNSRecord

from ..domain import DomainName
from ..embedding import FileEmbedder, HashEmbedder
from ..enrichment import Enricher, JsonCache, MemoryCache
from ..errors import InvalidDomain
from .decide import (BaseList, BlockResponse, Decision, ModelSet, ProxyConfig, ScoreCounter,
                     Source, Verdict, VerdictCache, decide)

logger = logging.getLogger(__name__)

BLOCK_TTL = 60
_MODEL_TIERS = (Source.BASE_LIST, Source.PRIVATE_MODEL, Source.FEDERATED_MODEL)


class Metrics:
    """Thread-safe counters, rendered as ``name value`` lines."""

    def __init__(self):
        self._lock = threading.Lock()
        self.queries_total = 0
        self.cache_hits = 0
        self.upstream_failures = 0
        self.malformed_dropped = 0
        self.blocked_by_tier: Counter = Counter()

    def inc(self, name: str, n: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + n)

    def blocked(self, source: Source) -> None:
        with self._lock:
            self.blocked_by_tier[source.value] += 1

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "queries_total": self.queries_total,
                "cache_hits": self.cache_hits,
                "upstream_failures": self.upstream_failures,
                "malformed_dropped": self.malformed_dropped,
                "blocked_by_tier": {s.value: self.blocked_by_tier[s.value] for s in _MODEL_TIERS},
            }

    def render(self) -> str:
        snap = self.snapshot()
        lines = [f"{k} {v}" for k, v in snap.items() if k != "blocked_by_tier"]
        lines += [f'blocked_by_tier{{tier="{k}"}} {v}' for k, v in snap["blocked_by_tier"].items()]
        return "\n".join(lines) + "\n"


def block_reply(query: DNSRecord, mode: BlockResponse) -> DNSRecord:
    """Locally synthesized answer for a blocked query, same ID and question."""
    reply = query.reply()
    if mode is BlockResponse.NAME_ERROR:
        reply.header.rcode = RCODE.NXDOMAIN
        return reply
    q = query.q
    if q.qtype == QTYPE.A:
        reply.add_answer(RR(q.qname, QTYPE.A, rdata=A("0.0.0.0"), ttl=BLOCK_TTL))
    elif q.qtype == QTYPE.AAAA:
        reply.add_answer(RR(q.qname, QTYPE.AAAA, rdata=AAAA("::"), ttl=BLOCK_TTL))
    # other types get an empty NOERROR answer
    return reply


def servfail_reply(query: DNSRecord) -> DNSRecord:
    reply = query.reply()
    reply.header.rcode = RCODE.SERVFAIL
    return reply


class DnsProxy:
    """The proxy core: verdicts, caching, forwarding and metrics."""

    def __init__(self, base_list: BaseList, models: ModelSet, enricher, embedder,
                 upstream=("1.1.1.1", 53), block_response=BlockResponse.ZERO_ADDRESS,
                 threshold=0.5, verdict_cache_ttl=300.0, upstream_timeout=2.0):
        self.base_list = base_list
        self.models = models
        self.enricher = enricher
        self.embedder = embedder
        self.upstream = tuple(upstream)
        self.block_response = BlockResponse(block_response)
        self.threshold = threshold
        self.upstream_timeout = upstream_timeout
        self.cache = VerdictCache(verdict_cache_ttl)
        self.counter = ScoreCounter()
        self.metrics = Metrics()
        self._swap_lock = threading.Lock()

    @classmethod
    def from_config(cls, config: ProxyConfig) -> DnsProxy:
        models = ModelSet.load(config.federated_model, config.private_model)
        cache = JsonCache(config.cache_dir) if config.cache_dir else MemoryCache()
        if config.fixtures:
            enricher = Enricher.from_fixtures(config.fixtures, cache)
        else:
            from ..enrichment import LiveDnsClient, LiveWhoisClient

            if not config.whois_endpoint:
                raise ValueError("proxy config needs either fixtures or whois_endpoint")
            enricher = Enricher(LiveWhoisClient(config.whois_endpoint),
                                LiveDnsClient(config.upstream_host, config.upstream_port), cache)
        if config.vector_table:
            embedder = FileEmbedder(config.vector_table)
        else:
            embedder = HashEmbedder(models.input_width // 2)
        return cls(BaseList.load(config.base_list), models, enricher, embedder,
                   (config.upstream_host, config.upstream_port), config.block_response,
                   config.block_threshold, config.verdict_cache_ttl, config.upstream_timeout)

    # ------------------------------------------------------------ decisions

    def swap_models(self, models: ModelSet) -> None:
        with self._swap_lock:
            self.models = models
            self.cache.clear()

    def swap_base_list(self, base_list: BaseList) -> None:
        with self._swap_lock:
            self.base_list = base_list
            self.cache.clear()

    def verdict(self, domain: DomainName) -> Verdict:
        key = str(domain)
        hit = self.cache.get(key)
        if hit is not None:
            self.metrics.inc("cache_hits")
            return hit
        base_list, models = self.base_list, self.models
        verdict = decide(domain, base_list, models, self.enricher, self.embedder,
                         self.threshold, self.counter)
        self.cache.put(key, verdict)
        return verdict

    # ------------------------------------------------------------ wire

    def handle(self, data: bytes) -> bytes | None:
        """Response bytes for one query datagram, or None to drop it."""
        try:
            query = DNSRecord.parse(data)
        except Exception:
            self.metrics.inc("malformed_dropped")
            return None
        if query.header.qr or not query.questions:
            self.metrics.inc("malformed_dropped")
            return None
        self.metrics.inc("queries_total")
        name = str(query.q.qname).rstrip(".")
        try:
            domain = DomainName.parse(name)
        except InvalidDomain:
            domain = None
        if domain is not None:
            verdict = self.verdict(domain)
            if verdict.decision is Decision.BLOCK:
                self.metrics.blocked(verdict.source)
                return block_reply(query, self.block_response).pack()
        return self.forward(query, data)

    def forward(self, query: DNSRecord, data: bytes) -> bytes:
        """Relay the query verbatim; SERVFAIL if the upstream does not answer."""
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
            sock.settimeout(self.upstream_timeout)
            try:
                sock.sendto(data, self.upstream)
                while True:
                    reply, _ = sock.recvfrom(65535)
                    if len(reply) >= 2 and reply[:2] == data[:2]:
                        return reply
            except OSError as exc:
                logger.warning("upstream %s:%d failed: %s", *self.upstream, exc)
                self.metrics.inc("upstream_failures")
                return servfail_reply(query).pack()


class _UdpHandler(socketserver.BaseRequestHandler):
    def handle(self):
        data, sock = self.request
        reply = self.server.proxy.handle(data)
        if reply is not None:
            sock.sendto(reply, self.client_address)


class _MetricsHandler(socketserver.StreamRequestHandler):
    def handle(self):
        self.wfile.write(self.server.proxy.metrics.render().encode("ascii"))


class _UdpServer(socketserver.ThreadingUDPServer):
    daemon_threads = True
    allow_reuse_address = True


class _TcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class ProxyService:
    """Runs a :class:`DnsProxy` on a UDP socket plus an optional metrics port."""

    def __init__(self, proxy: DnsProxy, host="127.0.0.1", port=5353, metrics_port=None):
        self.proxy = proxy
        self.udp = _UdpServer((host, port), _UdpHandler)
        self.udp.proxy = proxy
        self.tcp = None
        if metrics_port is not None:
            self.tcp = _TcpServer((host, metrics_port), _MetricsHandler)
            self.tcp.proxy = proxy
        self._threads: list[threading.Thread] = []

    @property
    def address(self):
        return self.udp.server_address

    @property
    def metrics_address(self):
        return self.tcp.server_address if self.tcp else None

    def start(self) -> ProxyService:
        for srv in (self.udp, self.tcp):
            if srv is None:
                continue
            t = threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.1}, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        for srv in (self.udp, self.tcp):
            if srv is not None:
                srv.shutdown()
                srv.server_close()
        for t in self._threads:
            t.join()
        self._threads.clear()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(config: ProxyConfig, stop_event: threading.Event | None = None) -> None:
    """Serve until ``stop_event`` is set (or forever)."""
    service = ProxyService(DnsProxy.from_config(config), config.listen_host, config.listen_port,
                           config.metrics_port)
    stop_event = stop_event or threading.Event()
    logger.info("serving DNS on %s:%d", *service.address)
    with service:
        stop_event.wait()


def scrape_metrics(host: str, port: int, timeout: float = 2.0) -> dict:
    """Read the metrics endpoint into ``{name: int}``."""
    out = {}
    with socket.create_connection((host, port), timeout=timeout) as sock:
        chunks = []
        while True:
            chunk = sock.recv(4096)
            if not chunk:
                break
            chunks.append(chunk)
    for line in b"".join(chunks).decode("ascii").splitlines():
        key, _, value = line.rpartition(" ")
        out[key] = int(value)
    return out
