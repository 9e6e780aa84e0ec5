"""Exception hierarchy shared across the package."""


class RRPOError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RRPOError, ValueError):
    """Invalid configuration or non-conforming shapes."""


class ShapeError(ConfigurationError):
    pass


class NumericError(RRPOError, FloatingPointError):
    """A primitive received non-finite input."""


class UsageError(RRPOError):
    pass


class ValidationError(RRPOError, ValueError):
    """A preference pair or dataset failed validation.

    ``violations`` lists every violated invariant.
    """

    def __init__(self, message, violations=(), pair_id=None):
        super().__init__(message)
        self.violations = list(violations)
        self.pair_id = pair_id


class LengthError(RRPOError, ValueError):
    pass


class VocabularyError(RRPOError, ValueError):
    pass


class FormatError(RRPOError, ValueError):
    """Unreadable or incompatible file (bad magic, version or integrity hash)."""


class EvaluationError(RRPOError, ValueError):
    pass
