"""Error taxonomy for the package.

Errors are grouped so the command line tool can map them onto exit
codes: configuration problems, file format problems, and numeric
failures are distinct categories.
"""


class PatchregError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PatchregError):
    """Invalid configuration: bad value, unknown key, inconsistent options."""


class InputError(PatchregError):
    """Caller passed data that violates a documented precondition."""


class ShapeError(InputError):
    """Array shape mismatch; the message names the offending axis."""


class FormatError(PatchregError):
    """A file's bytes do not match the expected binary or text format."""


class NumericError(PatchregError):
    """Numeric failure at runtime, for example a non-finite loss."""
