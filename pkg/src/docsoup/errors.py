"""Exception hierarchy.

Each class carries the process exit code the CLI maps it to.
"""


class SoupError(Exception):
    exit_code = 5


class UsageError(SoupError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class DataError(SoupError):
    exit_code = 3


class DimensionError(DataError, ValueError):
    pass


class VocabError(DataError):
    pass


class InvalidExampleError(DataError):
    pass


class SplitError(DataError):
    pass


class PipelineError(DataError):
    pass


class FormatError(DataError):
    """Malformed, truncated or corrupt state/checkpoint file."""


class CorruptionError(FormatError):
    pass


class CacheMissError(DataError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"not in cache: {', '.join(self.missing)}")


class StateError(SoupError):
    exit_code = 4


class StaleStateError(StateError):
    """State was produced by a different model than the one using it."""


class IncompatibleStatesError(StateError):
    pass


class DegenerateStateError(StateError):
    pass


class ArityError(StateError, ValueError):
    pass
