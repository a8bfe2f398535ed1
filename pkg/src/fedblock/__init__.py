"""Malicious-domain classification from whois and DNS data, trained
federatedly across users, with a DNS filtering proxy for deployment."""
from .domain import DomainName
from .errors import FedBlockError, Rejected
from .seeding import derive_seed

__version__ = "0.1.0"

__all__ = ["DomainName", "FedBlockError", "Rejected", "derive_seed", "__version__"]
