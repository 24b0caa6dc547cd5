"""Exception types shared across the package."""


class Nucleus3DError(Exception):
    """Base class for all package errors."""


class RangeError(Nucleus3DError, IndexError):
    """A region or coordinate falls outside a volume."""


class DimensionError(Nucleus3DError, ValueError):
    """Array shapes or channel counts do not agree."""


class FormatError(Nucleus3DError, ValueError):
    """A volume or checkpoint file is malformed."""


class ConfigError(Nucleus3DError, ValueError):
    """A configuration value violates its invariants."""


class StateError(Nucleus3DError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward twice)."""
