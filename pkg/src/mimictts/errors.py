"""Exception taxonomy shared across the package.

Each class maps to one failure family so the CLI can translate errors
into stable exit codes without string matching.
"""


class MimicError(Exception):
    """Base class for all package errors."""


class ContractError(MimicError):
    """A documented precondition of an in-process API was violated."""


class ShapeError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(MimicError):
    """Invalid or inconsistent configuration value."""


class InputError(MimicError):
    """External input (file, audio, text) unusable."""


class DataError(MimicError):
    """Corpus content violates the data contract (e.g. out-of-vocabulary)."""


class SamplingError(MimicError):
    """No eligible item to draw from (reference pool exhausted)."""


class IntegrityError(MimicError):
    """Persisted artifact corrupt, truncated, or of an unsupported version."""


class NumericError(MimicError):
    """Non-finite values produced where finite ones are required."""


class UsageError(MimicError):
    """Command-line flags inconsistent with each other or the checkpoint."""
