"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data or arguments violate a documented contract."""


class ConfigurationError(ValidationError):
    """A run was configured inconsistently (e.g. missing checkpoint)."""


class EmptyEvaluationError(RuntimeError):
    """Nothing was left to evaluate (empty subset or all-zero unions)."""
