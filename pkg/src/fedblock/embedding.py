"""Text embedders and the whois/domain feature construction.

A record becomes ``[mean whois-line embedding] ++ [embedding of the sorted
domain keywords]``, 2*D values in total. Embedders are interchangeable:

* :class:`HashEmbedder` -- signed feature hashing, L2-normalized; offline
  and deterministic, used for tests and synthetic runs.
* :class:`FileEmbedder` -- looks vectors up by SHA-256 of the exact text in a
  JSON-lines table, so any external model can populate it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.feature_extraction.text import HashingVectorizer

from .domain import DomainName
from .errors import BlankLog, MissingVector, Rejected
from .seeding import sha256_hex

DEFAULT_DIM = 768
MAX_CHARS = 512


@dataclass
class EmbedderOutput:
    vector: np.ndarray
    has_unknown_tokens: bool = False


@dataclass
class Instance:
    features: np.ndarray
    label: int
    domain: DomainName

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        self.features = np.asarray(self.features, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"domain": str(self.domain), "label": int(self.label),
                "features": [float(v) for v in self.features]}

    @classmethod
    def from_dict(cls, row: dict) -> Instance:
        return cls(np.asarray(row["features"], dtype=np.float64), int(row["label"]),
                   DomainName.parse(row["domain"]))


class HashEmbedder:
    """Bag-of-tokens feature hashing into ``dim`` signed buckets.

    Tokens are maximal runs of word characters, lowercased. The summed vector
    is L2-normalized; text without tokens maps to the zero vector.
    """

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim
        self._vectorizer = HashingVectorizer(
            n_features=dim, lowercase=True, token_pattern=r"(?u)\b\w+\b",
            alternate_sign=True, norm="l2", dtype=np.float64,
        )

    def embed_many(self, texts) -> list[EmbedderOutput]:
        texts = list(texts)
        if not texts:
            return []
        mat = self._vectorizer.transform(texts).toarray()
        return [EmbedderOutput(row, False) for row in mat]

    def embed(self, text: str) -> EmbedderOutput:
        return self.embed_many([text])[0]


class FileEmbedder:
    """Precomputed vectors keyed by SHA-256 of the UTF-8 text.

    The table is JSON-lines ``{"sha256": hex, "vector": [...], "has_unk": bool}``
    and is loaded once at construction.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._table: dict[str, tuple[np.ndarray, bool]] = {}
        dim = None
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                row = json.loads(line)
                vec = np.asarray(row["vector"], dtype=np.float64)
                if dim is None:
                    dim = vec.shape[0]
                if vec.shape != (dim,) or not np.all(np.isfinite(vec)):
                    raise ValueError(f"{self.path}:{lineno}: bad vector")
                self._table[row["sha256"]] = (vec, bool(row.get("has_unk", False)))
        if dim is None:
            raise ValueError(f"{self.path}: empty vector table")
        self.dim = dim

    def embed(self, text: str) -> EmbedderOutput:
        try:
            vec, unk = self._table[sha256_hex(text)]
        except KeyError:
            raise MissingVector(f"no precomputed vector for text digest {sha256_hex(text)[:12]}") from None
        return EmbedderOutput(vec.copy(), unk)

    def embed_many(self, texts) -> list[EmbedderOutput]:
        return [self.embed(t) for t in texts]


def write_vector_table(path, entries) -> None:
    """Write ``(text, vector, has_unk)`` triples as a FileEmbedder table."""
    with open(path, "w", encoding="utf-8") as fh:
        for text, vector, has_unk in entries:
            fh.write(json.dumps({"sha256": sha256_hex(text),
                                 "vector": [float(v) for v in vector],
                                 "has_unk": bool(has_unk)}) + "\n")


def embed_text(text: str, embedder) -> EmbedderOutput:
    return embedder.embed(text)


def embed_whois(log, embedder) -> EmbedderOutput:
    """Average the embeddings of each line, truncated to 512 characters."""
    lines = [line[:MAX_CHARS] for line in log.lines]
    if not lines:
        raise BlankLog("whois log has no lines")
    outs = embedder.embed_many(lines)
    return EmbedderOutput(_mean_rows([o.vector for o in outs]),
                          any(o.has_unknown_tokens for o in outs))


def _mean_rows(vectors) -> np.ndarray:
    # sort each column before summing so the result is independent of line order
    stacked = np.sort(np.vstack(vectors), axis=0)
    return stacked.sum(axis=0) / stacked.shape[0]


def canonicalize_domains(assoc) -> str:
    names = assoc.names if hasattr(assoc, "names") else assoc
    if not names:
        raise ValueError("associated domain set is empty")
    keywords = set()
    for name in names:
        keywords.update(str(name).lower().split("."))
    keywords.discard("")
    return " ".join(sorted(keywords, key=lambda s: s.encode("utf-8")))


def _check_blank(bundle):
    # a log of only whitespace carries no registration data either
    return not bundle.whois.lines or not any(line.strip() for line in bundle.whois.lines)


def make_instance(bundle, label: int, embedder) -> Instance:
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    if _check_blank(bundle):
        raise Rejected("BlankWhois", bundle.domain)
    whois = embed_whois(bundle.whois, embedder)
    domains = embedder.embed(canonicalize_domains(bundle.assoc)[:MAX_CHARS])
    if whois.has_unknown_tokens or domains.has_unknown_tokens:
        raise Rejected("UnknownTokens", bundle.domain)
    return Instance(np.concatenate([whois.vector, domains.vector]), label, bundle.domain)


def make_instances(bundles, labels, embedder):
    """Batch :func:`make_instance`; returns ``(instances, rejections)``.

    ``rejections`` maps reason to the list of rejected domains. Whois lines
    of the whole batch go through the embedder in one call.
    """
    bundles = list(bundles)
    labels = list(labels)
    rejections: dict[str, list] = {"BlankWhois": [], "UnknownTokens": []}
    texts: list[str] = []
    spans = []
    for bundle, label in zip(bundles, labels):
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label!r}")
        if _check_blank(bundle):
            rejections["BlankWhois"].append(bundle.domain)
            continue
        start = len(texts)
        texts.extend(line[:MAX_CHARS] for line in bundle.whois.lines)
        texts.append(canonicalize_domains(bundle.assoc)[:MAX_CHARS])
        spans.append((bundle, label, start, len(texts)))
    outs = embedder.embed_many(texts)
    instances = []
    for bundle, label, start, stop in spans:
        line_outs = outs[start:stop - 1]
        dom = outs[stop - 1]
        whois_vec = _mean_rows([o.vector for o in line_outs])
        if dom.has_unknown_tokens or any(o.has_unknown_tokens for o in line_outs):
            rejections["UnknownTokens"].append(bundle.domain)
            continue
        instances.append(Instance(np.concatenate([whois_vec, dom.vector]), label, bundle.domain))
    return instances, rejections


def instances_to_arrays(instances):
    X = np.vstack([inst.features for inst in instances]) if instances else np.zeros((0, 0))
    y = np.asarray([inst.label for inst in instances], dtype=np.int64)
    return X, y


def write_instances(path, instances) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict()) + "\n")


def read_instances(path) -> list[Instance]:
    with open(path, encoding="utf-8") as fh:
        return [Instance.from_dict(json.loads(line)) for line in fh if line.strip()]


class BundleEmbedder(BaseEstimator, TransformerMixin):
    """Transformer from record bundles to 2*D feature rows.

    Stateless; ``fit`` is a no-op. A rejected bundle raises
    :class:`~fedblock.errors.Rejected` unless ``on_reject="nan"``, in which
    case its row is filled with NaN.
    """

    def __init__(self, embedder=None, on_reject="raise"):
        self.embedder = embedder
        self.on_reject = on_reject

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        embedder = self.embedder if self.embedder is not None else HashEmbedder()
        rows = []
        for bundle in X:
            try:
                rows.append(make_instance(bundle, 0, embedder).features)
            except Rejected:
                if self.on_reject != "nan":
                    raise
                rows.append(np.full(2 * embedder.dim, np.nan))
        return np.vstack(rows) if rows else np.zeros((0, 2 * embedder.dim))
