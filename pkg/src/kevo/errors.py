"""Exception hierarchy shared by every kevo module."""


class KevoError(Exception):
    """Base class for all library errors."""


class ConfigError(KevoError):
    """Invalid configuration value or unknown architecture/technique."""


class DimensionError(KevoError, ValueError):
    """Shapes that do not conform for the requested operation."""


class StructuralError(KevoError):
    """Graph or mask structure is inconsistent (cycles, dangling edges, mask/param mismatch)."""


class UnsupportedTechniqueError(KevoError):
    """Operation requested for a split technique that does not support it."""


class TrainingError(KevoError, ArithmeticError):
    """Non-finite loss or gradient encountered during optimization."""


class DataError(KevoError):
    """Malformed or inconsistent dataset input."""


class CheckpointError(KevoError):
    """Unreadable, corrupted or version-mismatched checkpoint."""
