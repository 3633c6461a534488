"""Exception hierarchy shared across the package."""


class HistPetlError(Exception):
    """Base class for every error raised by histpetl."""


class DimensionError(HistPetlError, ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(HistPetlError, ValueError):
    """A precondition other than shape agreement was violated."""


class ConfigError(HistPetlError, ValueError):
    """Invalid model, method or run configuration."""


class NonFiniteError(HistPetlError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class SerializationError(HistPetlError):
    """Base for binary format problems (tensors, checkpoints, datasets)."""


class FormatError(SerializationError):
    """Wrong magic bytes or unsupported version."""


class TruncationError(SerializationError):
    """File ended before the declared payload was read."""


class LabelRangeError(SerializationError):
    """A stored label falls outside [0, C)."""


class CompatibilityError(HistPetlError):
    """Checkpoint, config or model architectures do not match."""


class MergeError(HistPetlError, ValueError):
    """A reparameterised branch cannot be folded into the requested layer."""
