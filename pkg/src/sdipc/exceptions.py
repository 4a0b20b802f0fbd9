"""Exception hierarchy shared by all sdipc modules."""


class IPCError(Exception):
    """Base class for every error raised by sdipc."""


class InputError(IPCError, ValueError):
    """Bad user-supplied data: undecodable image, zero-norm vector, bad shape."""


class StateError(IPCError, RuntimeError):
    """An operation needs a component that has not been loaded or fitted."""


class ConfigError(IPCError, ValueError):
    """Invalid configuration, preset mismatch, or incompatible checkpoints."""


class IntegrityError(IPCError):
    """A persisted artifact references parameters that are not allowed."""


class DegenerateInverseError(IPCError, ArithmeticError):
    """Every singular value fell under the threshold; the inverse is zero."""


class DatasetError(IPCError, FileNotFoundError):
    """Dataset files are missing or do not follow the expected layout."""
