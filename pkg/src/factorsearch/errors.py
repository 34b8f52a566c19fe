from __future__ import annotations


class FactorSearchError(Exception):
    """Base class for all package errors."""


class ConfigError(FactorSearchError):
    pass


class DataError(FactorSearchError):
    pass


class InsufficientDataError(FactorSearchError):
    pass


class DslSyntaxError(FactorSearchError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class TraceIntegrityError(FactorSearchError):
    def __init__(self, message: str, seq: int | None = None):
        super().__init__(message)
        self.seq = seq


class DuplicateNameError(FactorSearchError):
    pass


class ProtocolFrozenError(FactorSearchError):
    pass


class StageDependencyError(FactorSearchError):
    pass


class AgentError(FactorSearchError):
    pass
