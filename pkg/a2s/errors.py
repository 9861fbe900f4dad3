class A2SError(Exception):
    """Base class for errors caused by user input or configuration."""

    exit_code = 1


class ArgumentError(A2SError, ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigError(A2SError):
    """Configuration is inconsistent, incomplete or refers to missing artifacts."""


class CapacityError(A2SError):
    """A piece does not fit into the configured page budget."""


class FormatError(A2SError):
    """A persisted file is corrupt or was written by an unknown format version."""
