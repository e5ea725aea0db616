"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every error raised on a
user-facing path should derive from :class:`CodecError`.
"""


class CodecError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class InputError(CodecError, ValueError):
    """Rejected input: wrong shapes, mismatched dimensions, bad values."""


class IngestionError(CodecError):
    """Raw video file could not be read."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigurationError(CodecError, ValueError):
    """Inconsistent configuration (schedule, codec flags, gains, loss)."""

    exit_code = 1


class EvaluationError(CodecError):
    """RD evaluation could not be carried out (e.g. no quality overlap)."""


class DecodeError(CodecError):
    """Corrupted or truncated bitstream."""

    exit_code = 3

    def __init__(self, message: str, frame_index: int | None = None):
        if frame_index is not None:
            message = f"frame {frame_index}: {message}"
        super().__init__(message)
        self.frame_index = frame_index


class VersionError(DecodeError):
    """Bitstream was produced with an incompatible checkpoint or format."""
