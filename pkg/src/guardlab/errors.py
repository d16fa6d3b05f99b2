"""Exception hierarchy shared across guardlab."""


class GuardLabError(Exception):
    """Base class for all library errors."""


class InvalidPrefixError(GuardLabError, ValueError):
    pass


class InvalidSequenceError(GuardLabError, ValueError):
    pass


class EnumerationTooLargeError(GuardLabError):
    pass


class DeadEndError(GuardLabError):
    """A masked context has no remaining probability mass."""


class EmptyGoldSupportError(GuardLabError):
    """No sequence satisfies the constraint with positive base mass (Z = 0)."""


class ConstraintViolatingError(GuardLabError, ValueError):
    pass


class DrawBudgetExhausted(GuardLabError):
    """Raised when a sampler runs out of proposal draws.

    The partial ``SamplerReport`` is attached as ``report``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DegenerateDatasetError(GuardLabError):
    pass


class TrainingDivergedError(GuardLabError):
    pass


class GuaranteeAuditError(GuardLabError):
    pass


class ConfigError(GuardLabError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
