"""Exception hierarchy shared by every stage of the pipeline."""


class FedBlockError(Exception):
    """Base class for all package errors."""


class InvalidDomain(FedBlockError, ValueError):
    pass


class EmptyCorpus(FedBlockError):
    pass


class NotFound(FedBlockError, LookupError):
    pass


class ChainTooDeep(FedBlockError):
    pass


class MissingVector(FedBlockError, KeyError):
    pass


class BlankLog(FedBlockError):
    pass


class Rejected(FedBlockError):
    """An instance was dropped before training or inference.

    ``reason`` is one of ``"BlankWhois"`` or ``"UnknownTokens"``.
    """

    def __init__(self, reason, domain=None):
        self.reason = reason
        self.domain = domain
        super().__init__(f"{domain or '<instance>'}: rejected ({reason})")


class WidthMismatch(FedBlockError, ValueError):
    pass


class EmptyDataset(FedBlockError, ValueError):
    pass


class SingleClass(FedBlockError, ValueError):
    pass


class InsufficientData(FedBlockError, ValueError):
    pass


class NoAcceptedUpdates(FedBlockError):
    pass


class ModelMissing(FedBlockError):
    pass
