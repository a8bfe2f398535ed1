"""Per-domain blocking decisions: base list first, then the two models."""
from __future__ import annotations

import enum
import json
import logging
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from .. import mlp
from ..domain import DomainName
from ..embedding import make_instance
from ..errors import FedBlockError, ModelMissing, Rejected
from ..filterlists import RuleKind, parse_list

logger = logging.getLogger(__name__)


class Decision(str, enum.Enum):
    BLOCK = "Block"
    ALLOW = "Allow"


class Source(str, enum.Enum):
    BASE_LIST = "BaseList"
    PRIVATE_MODEL = "PrivateModel"
    FEDERATED_MODEL = "FederatedModel"
    UPSTREAM = "Upstream"


class BlockResponse(str, enum.Enum):
    ZERO_ADDRESS = "ZeroAddress"
    NAME_ERROR = "NameError"


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    source: Source
    score: float | None = None

    def __post_init__(self):
        if self.source is Source.BASE_LIST and self.score is not None:
            raise ValueError("base-list verdicts carry no score")

    @property
    def blocked(self) -> bool:
        return self.decision is Decision.BLOCK


@dataclass
class ProxyConfig:
    federated_model: str
    base_list: str
    private_model: str | None = None
    listen_host: str = "127.0.0.1"
    listen_port: int = 5353
    upstream_host: str = "1.1.1.1"
    upstream_port: int = 53
    upstream_timeout: float = 2.0
    block_response: BlockResponse = BlockResponse.ZERO_ADDRESS
    block_threshold: float = 0.5
    verdict_cache_ttl: float = 300.0
    metrics_port: int | None = None
    fixtures: str | None = None
    cache_dir: str | None = None
    whois_endpoint: str | None = None
    vector_table: str | None = None

    def __post_init__(self):
        self.block_response = BlockResponse(self.block_response)
        if not 0 < self.block_threshold < 1:
            raise ValueError("block_threshold must be in (0, 1)")
        if self.verdict_cache_ttl < 0:
            raise ValueError("verdict_cache_ttl must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> ProxyConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown proxy config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> ProxyConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class BaseList:
    """Blocked names; a listed name also covers all of its subdomains."""

    def __init__(self, names=()):
        self.names = frozenset(DomainName.parse(n) for n in names)

    @classmethod
    def load(cls, path) -> BaseList:
        with open(path, encoding="utf-8", errors="replace") as fh:
            rules = parse_list(fh.read().splitlines(), "auto")
        return cls(r.domain for r in rules if r.kind is RuleKind.DOMAIN_BLOCK)

    def match(self, domain: DomainName) -> DomainName | None:
        for suffix in domain.suffixes():
            if suffix in self.names:
                return suffix
        return None

    def __contains__(self, domain) -> bool:
        return self.match(DomainName.parse(domain)) is not None

    def __len__(self):
        return len(self.names)


@dataclass(frozen=True)
class ModelSet:
    """Immutable snapshot of the models used for decisions."""

    federated: mlp.ModelParams
    private: mlp.ModelParams | None = None
    version: int = 0

    def __post_init__(self):
        if self.federated is None:
            raise ModelMissing("a federated model is required")
        if self.private is not None and self.private.input_width != self.federated.input_width:
            raise ModelMissing("private and federated models expect different feature widths")

    @property
    def input_width(self) -> int:
        return self.federated.input_width

    @classmethod
    def load(cls, federated_path, private_path=None, version=0) -> ModelSet:
        return cls(_load_model(federated_path), _load_model(private_path) if private_path else None,
                   version)


def _load_model(path):
    if not Path(path).is_file():
        raise ModelMissing(f"model file not found: {path}")
    return mlp.load_params(path)


@dataclass
class ScoreCounter:
    """Counts model invocations, so cache behaviour can be observed."""

    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def score(self, params, features) -> float:
        with self._lock:
            self.calls += 1
        return float(mlp.predict_proba(params, features[None, :])[0])


def decide(domain, base_list: BaseList, models: ModelSet, enricher, embedder,
           threshold: float = 0.5, counter: ScoreCounter | None = None) -> Verdict:
    """Verdict for one name; precedence BaseList > private > federated > upstream.

    Scores are the probability of the benign label, so a score below
    ``threshold`` blocks. Any failure to enrich or embed the name allows it.
    """
    domain = DomainName.parse(domain)
    if base_list.match(domain) is not None:
        return Verdict(Decision.BLOCK, Source.BASE_LIST)
    counter = counter if counter is not None else ScoreCounter()
    try:
        bundle = enricher.bundle(domain)
        features = make_instance(bundle, 1, embedder).features
    except Rejected as exc:
        logger.info("allowing %s: instance rejected (%s)", domain, exc.reason)
        return Verdict(Decision.ALLOW, Source.UPSTREAM)
    except (FedBlockError, OSError, ValueError) as exc:
        logger.warning("allowing %s: enrichment failed: %s", domain, exc)
        return Verdict(Decision.ALLOW, Source.UPSTREAM)
    if features.shape[0] != models.input_width:
        logger.error("allowing %s: feature width %d does not match model width %d",
                     domain, features.shape[0], models.input_width)
        return Verdict(Decision.ALLOW, Source.UPSTREAM)
    score = None
    if models.private is not None:
        score = counter.score(models.private, features)
        if score < threshold:
            return Verdict(Decision.BLOCK, Source.PRIVATE_MODEL, score)
    score = counter.score(models.federated, features)
    if score < threshold:
        return Verdict(Decision.BLOCK, Source.FEDERATED_MODEL, score)
    return Verdict(Decision.ALLOW, Source.UPSTREAM, score)


class VerdictCache:
    """Thread-safe per-domain verdict cache with a fixed TTL."""

    def __init__(self, ttl: float = 300.0, clock=time.monotonic):
        self.ttl = ttl
        self.clock = clock
        self._entries: dict = {}
        self._lock = threading.Lock()

    def get(self, domain) -> Verdict | None:
        now = self.clock()
        with self._lock:
            hit = self._entries.get(domain)
            if hit is None:
                return None
            verdict, expires = hit
            if now >= expires:
                del self._entries[domain]
                return None
            return verdict

    def put(self, domain, verdict: Verdict) -> None:
        if self.ttl <= 0:
            return
        with self._lock:
            self._entries[domain] = (verdict, self.clock() + self.ttl)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()

    def __len__(self):
        with self._lock:
            return len(self._entries)
