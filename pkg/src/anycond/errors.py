"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, schema, or shape mismatch. CLI exit code 2."""


class UsageError(RuntimeError):
    """API misuse, e.g. a stale backprop trace or an observed query dimension."""


class TrainingError(RuntimeError):
    """Unrecoverable numerical failure during optimization. CLI exit code 3."""
