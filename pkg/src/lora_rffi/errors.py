"""Exception hierarchy shared by all modules."""


class RffiError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(RffiError, ValueError):
    """A parameter set violates one of its invariants."""


class InputError(RffiError, ValueError):
    """An argument has the wrong shape, length or content."""


class StateError(RffiError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class FormatError(RffiError, ValueError):
    """A file does not follow the expected on-disk layout."""


class CorruptionError(FormatError):
    """Stored data failed an integrity check."""
