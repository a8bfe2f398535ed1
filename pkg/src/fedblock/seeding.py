"""Seed derivation and content digests."""
from __future__ import annotations

import hashlib


def derive_seed(seed: int, *parts) -> int:
    """Derive a stable 63-bit child seed from ``seed`` and a path of labels.

    Independent of ``PYTHONHASHSEED``, so stages and clients can be reseeded
    in any order and still reproduce.
    """
    h = hashlib.sha256(repr((int(seed),) + tuple(str(p) for p in parts)).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
