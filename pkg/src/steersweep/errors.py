"""Exception hierarchy. Each family maps to a CLI exit code."""


class SteerSweepError(Exception):
    exit_code = 1


class ConfigError(SteerSweepError, ValueError):
    exit_code = 2


class CheckpointError(SteerSweepError):
    """Missing, truncated or shape-inconsistent model files."""

    exit_code = 3


class DatasetError(SteerSweepError, ValueError):
    exit_code = 3


class TokenizationError(SteerSweepError, ValueError):
    exit_code = 3


class NumericError(SteerSweepError, ArithmeticError):
    exit_code = 4
