"""Exception hierarchy shared by every module.

The CLI maps each family onto a stable exit code, see ``atmskd.cli``.
"""


class AtmsError(Exception):
    """Base class for all errors raised by atmskd."""


class DimensionError(AtmsError, ValueError):
    """Tensor shapes do not conform."""


class ParameterError(AtmsError, ValueError):
    """A numeric argument is outside its allowed range."""


class ValidationError(AtmsError, ValueError):
    """Input data violates a documented precondition."""


class ConfigurationError(AtmsError, ValueError):
    """Invalid or inconsistent configuration."""


class SpecError(ConfigurationError):
    """An architecture description cannot be built."""


class UsageError(AtmsError, RuntimeError):
    """An API was called in the wrong state."""


class NumericalError(AtmsError, FloatingPointError):
    """NaN or Inf appeared during a computation."""


class ModelMismatchError(ConfigurationError):
    """Teacher and student (or checkpoint and data) are incompatible."""


class CheckpointError(AtmsError, IOError):
    """Base class for checkpoint decoding failures."""

    code = "checkpoint"


class CheckpointVersionError(CheckpointError):
    code = "version"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


class CheckpointShapeError(CheckpointError):
    code = "shape"
