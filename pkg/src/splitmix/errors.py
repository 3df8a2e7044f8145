"""Exception taxonomy shared across the package."""


class SplitmixError(Exception):
    """Base class for all package errors."""


class ShapeError(SplitmixError, ValueError):
    """Tensor shapes or dimensions are inconsistent."""


class ParameterError(SplitmixError, ValueError):
    """A parameter is outside its admissible range."""


class ProtocolError(SplitmixError, RuntimeError):
    """A protocol rule was violated (message order, non-partition masks, ...)."""


class StateError(SplitmixError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward without caches)."""


class InternalConsistencyError(SplitmixError, RuntimeError):
    """An invariant that must hold by construction was violated."""
