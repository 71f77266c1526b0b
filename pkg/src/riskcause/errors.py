class RiskCauseError(Exception):
    """Base class for package errors."""


class DataError(RiskCauseError):
    """Missing, malformed or inconsistent data on disk."""


class UnsupportedVersionError(DataError):
    pass


class ChecksumError(DataError):
    pass


class CheckpointError(DataError):
    """Corrupt checkpoint or checkpoint/config mismatch."""


class NumericError(RiskCauseError):
    """Training diverged (non-finite loss or parameters)."""
