"""Exception hierarchy. Each family maps to one CLI exit code."""

from __future__ import annotations


class OsadError(Exception):
    exit_code = 1


class ConfigError(OsadError):
    exit_code = 2


class DataError(OsadError):
    """A dataset, annotation or fold file problem; ``path`` names the culprit."""

    exit_code = 3

    def __init__(self, message: str, path=None):
        self.path = None if path is None else str(path)
        if self.path is not None:
            message = f"{message}: {self.path}"
        super().__init__(message)


class MissingFileError(DataError):
    pass


class MalformedAnnotationError(DataError):
    pass


class NonBinaryMaskError(DataError):
    pass


class InsufficientQueriesError(DataError):
    pass


class UnwritablePathError(DataError):
    pass


class DivergenceError(OsadError):
    """Raised when the training loss stops being finite."""

    exit_code = 4

    def __init__(self, message: str, last_checkpoint=None):
        self.last_checkpoint = last_checkpoint
        if last_checkpoint is not None:
            message = f"{message} (last good checkpoint: {last_checkpoint})"
        super().__init__(message)
