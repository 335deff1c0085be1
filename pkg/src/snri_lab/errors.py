"""Exception hierarchy.

Every error that signals a violated precondition or a malformed input derives
from :class:`ContractError`; the CLI maps those to exit code 2.
"""


class SnriLabError(Exception):
    """Base class for all package errors."""


class ContractError(SnriLabError, ValueError):
    """A caller violated an input contract."""


class SilentReference(ContractError):
    pass


class SilentNoise(ContractError):
    pass


class LengthMismatch(ContractError):
    pass


class InvalidLabel(ContractError):
    pass


class InvalidParams(ContractError):
    pass


class TooShort(ContractError):
    pass


class UnsupportedFormat(ContractError):
    pass


class DegenerateSubspace(ContractError):
    pass


class ShapeMismatch(ContractError):
    pass


class NonScalarLoss(ContractError):
    pass


class EmptyCorpus(ContractError):
    pass


class IncompatibleCheckpoint(ContractError):
    pass


class SchemaMismatch(ContractError):
    pass


class ConfigError(ContractError):
    pass


class NonFiniteValue(SnriLabError, ArithmeticError):
    """An operation produced NaN or Inf."""


class SpentGraph(SnriLabError, RuntimeError):
    """backward() was called twice on the same tape."""


class IoError(SnriLabError, OSError):
    pass
