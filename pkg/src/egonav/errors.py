"""Exception types shared across the package."""


class EgoNavError(Exception):
    """Base class for all package errors."""


class ContractViolation(EgoNavError, ValueError):
    """A caller broke an operation's precondition."""


class ParseError(EgoNavError):
    pass


class InvariantViolation(EgoNavError):
    pass


class OffMap(EgoNavError, IndexError):
    pass


class UnknownCategory(EgoNavError, KeyError):
    pass


class NoFreeSpace(EgoNavError):
    pass


class UnknownMarker(EgoNavError, KeyError):
    pass


class NoPath(EgoNavError):
    pass


class Stuck(EgoNavError):
    pass


class RetrieverFailure(EgoNavError):
    pass


class PolicyFailure(EgoNavError):
    """Raised when a policy cannot produce a legal decision.

    ``attempts`` counts wire round trips made before giving up and
    ``requeries`` the number of correction prompts sent.
    """

    def __init__(self, message: str, attempts: int = 0, requeries: int = 0):
        super().__init__(message)
        self.attempts = attempts
        self.requeries = requeries


class MalformedResponse(EgoNavError):
    pass


class HallucinatedMarker(EgoNavError):
    def __init__(self, marker_id: int, legal: list[int]):
        super().__init__(f"marker {marker_id} not among legal ids {legal}")
        self.marker_id = marker_id
        self.legal = legal


class WireError(EgoNavError):
    pass


class CategoryMissing(EgoNavError):
    pass


class RationaleRejected(EgoNavError):
    pass


class InsufficientEdge(EgoNavError, UserWarning):
    """Fewer floor-edge points than requested; issued as a warning."""


class ConfigError(EgoNavError):
    pass


class ScriptError(ConfigError):
    pass


class PortInUse(EgoNavError):
    pass
