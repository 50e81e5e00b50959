"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 2 (argparse),
``DataFormatError`` and other bad-input errors exit 3, ``NumericalError``
exits 4.
"""


class CascadeInversionError(Exception):
    """Base class for errors raised by this package."""


class DataFormatError(CascadeInversionError, ValueError):
    """A file (image, model, trace, config) is malformed or truncated."""


class NumericalError(CascadeInversionError, RuntimeError):
    """A computation produced non-finite values or diverged."""
