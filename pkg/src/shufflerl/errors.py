"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: usage/config problems exit 1,
data problems exit 2, anything else exits 3.
"""


class ShuffleRlError(Exception):
    """Base class for all package errors."""


class DataError(ShuffleRlError):
    """Bad input data (file, row, or dataset-level violation).

    ``source`` and ``line`` carry file/line context when the error comes
    from a loader.
    """

    def __init__(self, message: str, *, source: str | None = None, line: int | None = None):
        self.source = source
        self.line = line
        prefix = ""
        if source is not None:
            prefix = f"{source}:" if line is None else f"{source}:{line}:"
            prefix += " "
        super().__init__(prefix + message)


class InsufficientHistoryError(DataError):
    """Not enough days to satisfy a lookback or window requirement."""


class ConfigError(ShuffleRlError):
    """Invalid run configuration or command usage."""


class EpisodeDoneError(ShuffleRlError):
    """step() called on an environment whose episode already ended."""


class NonFiniteError(ShuffleRlError):
    """A NaN or Inf emerged from a numeric operation.

    ``where`` names the layer or operation that produced it.
    """

    def __init__(self, where: str, detail: str = ""):
        self.where = where
        message = f"non-finite values in {where}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class UndefinedMetricError(ShuffleRlError):
    """A metric is mathematically undefined for the given input."""
