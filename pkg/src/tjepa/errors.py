"""Exception types shared across the package."""


class ConfigError(Exception):
    """Bad run configuration: unknown key, missing value, wrong type."""


class DataError(Exception):
    """Malformed or inconsistent input data (parse failures, invariant violations)."""


class NumericError(Exception):
    """Numerical failure that aborts training (NaN loss or gradient)."""


class CheckpointError(Exception):
    """Checkpoint file is corrupt or belongs to a different configuration."""
