"""Exception hierarchy shared by every subsystem."""


class NewsRecError(Exception):
    """Base class for all library errors."""


class DimensionError(NewsRecError, ValueError):
    pass


class DegenerateInputError(NewsRecError, ValueError):
    """A softmax row or attention sequence has no unmasked position."""


class UsageError(NewsRecError, RuntimeError):
    pass


class ConfigError(NewsRecError, ValueError):
    pass


class DataError(NewsRecError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class StaleCacheError(DataError):
    """Cached artifact no longer matches its sources, config, or model state."""


class NumericError(NewsRecError, ArithmeticError):
    """Non-finite loss or gradient."""


class SkipImpression(DataError):
    """An impression without both a positive and a negative cannot be scored."""


class EmptyReportError(DataError):
    """Every impression in an evaluation batch was skipped."""


class CacheMissError(DataError):
    """A requested news or user vector is not in the precomputed cache."""


class EmitError(NewsRecError, OSError):
    """An analysis artifact could not be written."""
