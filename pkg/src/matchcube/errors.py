"""Exception types raised by matchcube operations."""


class MatchcubeError(Exception):
    """Base class for all matchcube errors."""


class SchemaError(MatchcubeError):
    """A table, column, or designation does not satisfy a structural contract."""


class DataError(MatchcubeError):
    """Row- or value-level problem: parse failures, duplicate keys, bad ranges."""


class EstimationError(MatchcubeError):
    """An estimator received input it cannot produce a defined answer for."""


class ConfigError(MatchcubeError):
    """Invalid analysis configuration. Carries the full list of problems found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
