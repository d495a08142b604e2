class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class ConfigurationError(ValueError):
    """Raised for inconsistent or unsupported configuration."""


class JudgeError(RuntimeError):
    """A judge client failed to produce a usable verdict within its retry budget."""
