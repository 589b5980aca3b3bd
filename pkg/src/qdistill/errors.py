"""Exception taxonomy shared across the package; the CLI maps these to exit codes."""


class ConfigError(Exception):
    """Invalid or inconsistent configuration (unresolved sites, bad depths, schema violations)."""


class DataError(Exception):
    """Problems with datasets or serialized artifacts."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt, truncated, or incompatible with the requested config."""


class CalibrationError(Exception):
    """Calibration observed invalid values or was run in an invalid state."""


class DivergenceError(Exception):
    """Training produced a non-finite loss."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given input (e.g. kurtosis of a constant tensor)."""
