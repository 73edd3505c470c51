"""Exception hierarchy shared by every fedtrust module."""


class FedTrustError(Exception):
    """Base class for all library errors."""


class ConfigurationError(FedTrustError, ValueError):
    pass


class ShapeError(FedTrustError, ValueError):
    pass


class UsageError(FedTrustError, RuntimeError):
    pass


class DataError(FedTrustError, ValueError):
    pass


class IdxParseError(DataError):
    pass


class BadMagicError(IdxParseError):
    pass


class TruncatedPayloadError(IdxParseError):
    pass


class CountMismatchError(IdxParseError):
    pass


class StratificationError(DataError):
    pass


class ThreatModelError(FedTrustError, ValueError):
    """Raised when an attack schedule exceeds the f <= 0.3 threat model."""


class SizeError(FedTrustError, ValueError):
    pass


class RoundError(FedTrustError):
    """Wraps a failure inside the round loop with the round number attached."""

    def __init__(self, round_index: int, cause: BaseException):
        super().__init__(f"round {round_index}: {type(cause).__name__}: {cause}")
        self.round_index = round_index
        self.cause = cause
