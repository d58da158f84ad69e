"""Exception hierarchy shared across the toolkit.

The three roots map onto CLI exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class MemdialError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(MemdialError):
    """Invalid configuration, arguments, or call sequencing."""

    exit_code = 2


class DataError(MemdialError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class NumericError(MemdialError):
    """Non-finite values or numeric-domain violations."""

    exit_code = 4


class CorpusParseError(DataError):
    """A corpus/memory/truth file line failed to parse or validate."""

    def __init__(self, message, line_no=None, path=None):
        self.line_no = line_no
        self.path = path
        prefix = ""
        if path is not None:
            prefix += f"{path}: "
        if line_no is not None:
            prefix += f"line {line_no}: "
        super().__init__(prefix + message)


class EmptyCorpusError(DataError):
    pass


class MissingUserError(DataError):
    pass


class CompositionError(ConfigError):
    """A required segment for a composition kind is missing."""


class VocabError(DataError):
    """Token outside the model vocabulary."""


class StateError(ConfigError):
    """Operation called in the wrong training-state phase."""
