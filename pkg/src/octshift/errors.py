"""Exception hierarchy. Each family maps to one CLI exit code."""


class OctShiftError(Exception):
    exit_code = 1


class ConfigError(OctShiftError, ValueError):
    exit_code = 2


class DataError(OctShiftError):
    exit_code = 3


class FormatError(DataError, ValueError):
    """Malformed container file."""


class ValidationError(DataError, ValueError):
    """Data violates a type invariant (range, shape, label values)."""


class GenerationError(DataError):
    pass


class SelectionError(DataError, ValueError):
    pass


class TrainingAbort(OctShiftError, RuntimeError):
    exit_code = 4


class OrchestrationError(OctShiftError, RuntimeError):
    exit_code = 5
