"""Exception types shared across the package."""


class EnsdistillError(Exception):
    """Base class for all package errors."""


class ShapeError(EnsdistillError, ValueError):
    """Operands have incompatible or unexpected shapes."""


class DegenerateInputError(EnsdistillError, ValueError):
    """An input is numerically degenerate (e.g. a zero row fed to a normalizer)."""


class InvalidMaskError(EnsdistillError, ValueError):
    """A masked softmax group has no finite entry left."""


class GraphError(EnsdistillError, ValueError):
    """Reverse-mode differentiation was asked about a node it cannot handle."""


class ConfigError(EnsdistillError, ValueError):
    """A configuration document or parameter set is invalid."""


class DataFormatError(EnsdistillError, ValueError):
    """A data file does not match the documented format."""


class CheckpointFormatError(EnsdistillError, ValueError):
    """A checkpoint file has a bad magic, version, or is truncated."""


class DivergenceError(EnsdistillError, RuntimeError):
    """Training produced a non-finite or exploding loss/gradient."""
