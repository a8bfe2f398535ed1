import socket
import threading

import numpy as np
import pytest
from dnslib import QTYPE, RR, A, DNSRecord
from hypothesis import HealthCheck, settings

from fedblock.embedding import HashEmbedder, instances_to_arrays, make_instances
from fedblock.synthetic import make_synthetic_bundles

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


class FakeUpstream:
    """UDP resolver answering every A query with a fixed address."""

    def __init__(self, address="10.0.0.7", silent=False):
        self.answer = address
        self.silent = silent
        self.queries = 0
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.settimeout(0.2)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self.sock.getsockname()

    def _run(self):
        while not self._stop.is_set():
            try:
                data, addr = self.sock.recvfrom(4096)
            except OSError:
                continue
            self.queries += 1
            if self.silent:
                continue
            q = DNSRecord.parse(data)
            r = q.reply()
            r.add_answer(RR(q.q.qname, QTYPE.A, rdata=A(self.answer), ttl=42))
            self.sock.sendto(r.pack(), addr)

    def close(self):
        self._stop.set()
        self._thread.join()
        self.sock.close()


@pytest.fixture
def fake_upstream():
    up = FakeUpstream()
    yield up
    up.close()


@pytest.fixture(scope="session")
def small_records():
    bundles, labels, groups = make_synthetic_bundles(240, seed=11)
    return bundles, labels


@pytest.fixture(scope="session")
def small_xy(small_records):
    bundles, labels = small_records
    instances, _ = make_instances(bundles, labels, HashEmbedder(32))
    X, y = instances_to_arrays(instances)
    return X, y


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
