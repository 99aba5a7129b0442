"""Exception hierarchy shared by every module.

Exit-code mapping for the CLI lives in cli.py: ConfigError -> 2,
ContractError (and subclasses) -> 3, FormatError -> 4.
"""


class CrossmodalError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CrossmodalError):
    """Invalid configuration: unknown rule ids, bad hyperparameters,
    unregistered modalities/heads, schedule invariant violations."""


class ContractError(CrossmodalError):
    """A documented precondition or postcondition was violated."""


class DimensionError(ContractError):
    """Shape/dimension mismatch between operands."""


class NumericsError(ContractError):
    """Non-finite value (NaN/Inf) produced by a committed operation."""


class FormatError(CrossmodalError):
    """Malformed or unsupported on-disk file (bad magic, unknown version)."""
