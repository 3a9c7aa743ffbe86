class BambooError(Exception):
    pass


class ConfigError(BambooError):
    """A configuration value is invalid."""


class UnsupportedTypeError(ConfigError):
    pass


class UnknownKeyError(ConfigError):
    """A configuration document carries a key that is not a field."""


class ShapeError(BambooError):
    """Operand shapes do not agree."""


class NonFiniteError(BambooError):
    """A NaN or infinite value reached an operation boundary."""


class EmptyMaskError(BambooError):
    """A mask selects no positions."""


class DivergenceError(BambooError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


class ConfigMismatchError(BambooError):
    """Two models or stages that must share a configuration do not."""


class PreconditionError(BambooError):
    """A verifier was asked to run outside the conditions it is defined for."""


class EmptyCandidateSetError(BambooError):
    """No width satisfies the requested cost band."""

    def __init__(self, message: str, suggestions=()):
        super().__init__(message)
        self.suggestions = list(suggestions)


class FormatError(BambooError):
    """A binary file is malformed."""


class MissingDependencyError(BambooError):
    """An optional dependency is required but not installed."""
