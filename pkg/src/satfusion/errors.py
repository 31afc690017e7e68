"""Exception hierarchy shared across the package.

Every error raised on purpose derives from :class:`SatFusionError`, so callers
(and the CLI) can distinguish data problems from genuine bugs.
"""

from __future__ import annotations


class SatFusionError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(SatFusionError):
    """Input text or container bytes could not be decoded.

    ``offset`` is the byte/character position of the failure when known,
    ``line`` the 1-based line number for line-oriented inputs.
    """

    def __init__(self, message: str, *, offset: int | None = None, line: int | None = None):
        parts = [message]
        if line is not None:
            parts.append(f"line {line}")
        if offset is not None:
            parts.append(f"offset {offset}")
        super().__init__(": ".join(parts) if len(parts) > 1 else message)
        self.offset = offset
        self.line = line


class SchemaError(SatFusionError):
    """A required field is missing or has the wrong structure."""

    def __init__(self, message: str, *, field: str | None = None):
        super().__init__(message)
        self.field = field


class ValidationError(SatFusionError):
    """A value is outside its documented range or violates an invariant."""

    def __init__(self, message: str, *, field: str | None = None):
        super().__init__(message)
        self.field = field


class DataError(SatFusionError):
    """A dataset-level problem: empty input, failed join, inconsistent corpus."""


class WeightsFormatError(SatFusionError):
    """Base for problems with a serialized network weights file."""


class VersionMismatchError(WeightsFormatError):
    """The weights file declares an unsupported format version."""


class DimensionMismatchError(WeightsFormatError):
    """The weights file declares dimensions incompatible with the network contract."""


class TruncatedFileError(WeightsFormatError):
    """The binary payload ends before the declared amount of data."""


class NumericalError(SatFusionError):
    """A non-finite value appeared where finite math was required."""
