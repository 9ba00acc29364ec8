"""Exception types and the process exit codes the CLI maps them to."""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class SegrsdError(Exception):
    """Base class for errors raised by this package."""


class DataFormatError(SegrsdError):
    """Malformed or inconsistent on-disk data (CLI exit code 2)."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic tag."""


class TruncatedFileError(DataFormatError):
    """File ends before the payload its header promises."""


class VersionError(DataFormatError):
    """File was written by an unknown format version."""


class ShapeMismatchError(DataFormatError):
    """Array shapes or dimensions disagree with the surrounding metadata."""


class MissingFileError(DataFormatError):
    """A manifest entry points at a file that does not exist."""


class NumericalError(SegrsdError):
    """Non-finite values encountered during optimization (CLI exit code 3)."""
