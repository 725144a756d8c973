"""Exception hierarchy for crossfind.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process status without a lookup table.
"""

from __future__ import annotations


class CrossfindError(Exception):
    exit_code = 2


class DataError(CrossfindError):
    """Bad input data (exit status 2)."""


class ProviderError(CrossfindError):
    exit_code = 3


# core
class DimensionError(DataError):
    pass


class DegenerateVectorError(DataError):
    pass


class DuplicateCandidateError(DataError):
    pass


class InvalidWeightsError(DataError):
    pass


# providers
class ProviderUnavailable(ProviderError):
    pass


class ProviderContractError(ProviderError):
    pass


class TemplateError(CrossfindError):
    pass


# indexer
class EmptyCodebaseError(DataError):
    pass


class IndexIncompatible(DataError):
    pass


class IndexCorrupt(DataError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at offset {offset})")
        self.offset = offset


class BuildInterrupted(ProviderError):
    """Raised when a provider outage stops an index build.

    Everything computed before the failure is already in the cache, so
    calling ``build_index`` again with ``resume_handle`` (the same cache)
    picks up where the build stopped.
    """

    def __init__(self, message: str, completed: int, total: int, resume_handle):
        super().__init__(f"{message} ({completed}/{total} snippets complete)")
        self.completed = completed
        self.total = total
        self.resume_handle = resume_handle


# fusion / eval
class ParameterError(DataError):
    pass


class CalibrationDataError(DataError):
    pass


class EvalInputError(DataError):
    pass


class ConfigError(CrossfindError):
    exit_code = 1
