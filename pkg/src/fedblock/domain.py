from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import InvalidDomain

_LABEL_RE = re.compile(r"^[a-z0-9_-]+$")


@dataclass(frozen=True, order=True)
class DomainName:
    """A normalized fully-qualified domain name.

    Labels are lowercase, carry no trailing dot, and there are always at
    least two of them. ``str(DomainName.parse(s))`` round-trips.
    """

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise InvalidDomain(f"need at least two labels: {'.'.join(self.labels)!r}")
        for label in self.labels:
            if not _LABEL_RE.match(label) or len(label) > 63:
                raise InvalidDomain(f"bad label {label!r}")

    @classmethod
    def parse(cls, text: str) -> DomainName:
        if isinstance(text, DomainName):
            return text
        name = text.strip().rstrip(".").lower()
        if not name:
            raise InvalidDomain("empty domain")
        if not name.isascii():
            try:
                name = name.encode("idna").decode("ascii")
            except UnicodeError as exc:
                raise InvalidDomain(f"cannot IDNA-encode {text!r}") from exc
        return cls(tuple(name.split(".")))

    def __str__(self) -> str:
        return ".".join(self.labels)

    @property
    def parent(self) -> DomainName | None:
        if len(self.labels) <= 2:
            return None
        return DomainName(self.labels[1:])

    def suffixes(self):
        """Yield this name and every parent down to the two-label suffix."""
        for i in range(len(self.labels) - 1):
            yield DomainName(self.labels[i:])


def try_parse(text: str) -> DomainName | None:
    try:
        return DomainName.parse(text)
    except InvalidDomain:
        return None
