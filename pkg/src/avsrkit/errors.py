"""Exception taxonomy shared by all avsrkit modules."""


class AvsrError(Exception):
    """Base class for all avsrkit errors."""


class ShapeError(AvsrError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(AvsrError, ValueError):
    """A configuration value or file is invalid."""


class ContractError(AvsrError, ValueError):
    """A caller violated an operation's documented precondition."""


class NumericError(AvsrError, ArithmeticError):
    """Non-finite or otherwise invalid numeric input/state."""


class DegenerateInputError(AvsrError, ValueError):
    """Input has no usable signal (constant waveform, silent noise, ...)."""


class InitializationError(AvsrError, RuntimeError):
    """A stateful component was used before it accumulated required state."""


class InfeasibleSampleError(AvsrError, RuntimeError):
    """A training sample cannot be scored (e.g. CTC target longer than input)."""


class DataError(AvsrError, ValueError):
    """A data file (manifest, waveform, frame stack) is malformed."""
