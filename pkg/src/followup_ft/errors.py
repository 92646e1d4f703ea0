"""Exception hierarchy shared by the library and the command line."""


class FollowupError(Exception):
    """Base class for all library errors."""

    exit_code = 3


class ConfigError(FollowupError, ValueError):
    """Invalid configuration value or unknown field."""

    exit_code = 1


class DataError(FollowupError, ValueError):
    """Input data violates a precondition (empty pools, missing annotations...)."""

    exit_code = 2


class FormatError(DataError):
    """Malformed file on disk."""


class UnsupportedError(DataError):
    """Well-formed file using a feature this package does not handle."""


class EmptyRegionError(DataError):
    """An organ mask slice has no foreground voxels."""


class DegenerateInputError(DataError):
    """Statistics are undefined for the given input (e.g. zero variance)."""


class ShapeError(DataError):
    """Arrays that must be congruent are not."""


class GenerationError(DataError):
    """The phantom generator could not satisfy its constraints."""
