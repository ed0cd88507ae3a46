"""Exception hierarchy shared across the package."""


class HMIError(Exception):
    """Base class for all package errors."""


class DimensionError(HMIError, ValueError):
    """Operand shapes do not conform."""


class VocabularyError(HMIError, KeyError):
    """A token id lies outside the model vocabulary."""


class ConfigurationError(HMIError, ValueError):
    pass


class BuildError(HMIError, ValueError):
    pass


class FormatError(HMIError, ValueError):
    """A binary artifact is malformed; ``offset`` marks where parsing stopped."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NotFoundError(HMIError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ConflictError(HMIError):
    pass


class CapacityError(HMIError):
    """A device allocation can never fit, regardless of evictions."""


class SchedulingError(HMIError, RuntimeError):
    """An internal pipeline contract was violated (e.g. compute before prefetch)."""


class RoutingError(NotFoundError):
    """An infer request names an instance that does not exist."""


class ValidationError(HMIError, ValueError):
    pass


class AllocationError(HMIError, ValueError):
    pass
