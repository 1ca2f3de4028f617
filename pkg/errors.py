"""
Exception hierarchy shared by every module.

Each error carries the process exit code the command line maps it to.
"""


class SymNetError(Exception):
    """Base class for all library errors"""
    exit_code = 1


class UsageError(SymNetError):
    """Bad command line: unknown verb, unknown flag, malformed value"""
    exit_code = 1


class ConfigurationError(SymNetError):
    """Invalid hyper-parameter or option value"""
    exit_code = 1


class DimensionError(SymNetError):
    """Shapes that cannot be combined"""
    exit_code = 3


class ContractError(SymNetError):
    """A precondition of an operation was violated by the caller"""
    exit_code = 3


class NumericError(SymNetError):
    """NaN/Inf reached a layer boundary or a loss"""
    exit_code = 3


class DataLoadError(SymNetError):
    """Dataset, embedding or feature file could not be read or validated"""
    exit_code = 2


class CheckpointError(DataLoadError):
    """Checkpoint unreadable or incompatible with the dataset"""
    exit_code = 2
