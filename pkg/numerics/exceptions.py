# numerics/exceptions.py


class CoatSimError(Exception):
    """Base class for every error raised by the simulator."""


class NonFiniteInput(CoatSimError, ValueError):
    """NaN or infinity reached a layer that only accepts finite values"""


class OutOfRange(CoatSimError, ValueError):
    """Value lies outside the domain of a normalized format (DE8 takes [-1, 1])"""


class InvalidSpec(CoatSimError, ValueError):
    """Generator, memory or layer specification failed validation"""


class TensorIOError(CoatSimError, OSError):
    """Reading or writing a tensor record failed at the OS level"""


class BadMagic(CoatSimError, ValueError):
    """File does not start with the expected record magic"""


class ShapeMismatch(CoatSimError, ValueError):
    """Shapes disagree: header vs payload, params vs grads, tape vs spec"""


class GeometryMismatch(CoatSimError, ValueError):
    """Tensor shape is not compatible with the requested quantization geometry"""


class AllZeroGroup(CoatSimError, ValueError):
    """Dynamic range is undefined for a group without nonzero elements"""


class DegenerateRange(CoatSimError, ValueError):
    """
    Dynamic range <= 1 (constant magnitude group).
    Callers fall back to k = 1 and keep the flag.
    """


class NonFiniteGradient(NonFiniteInput):
    """Gradient handed to the optimizer contains NaN or infinity"""


class TapeMismatch(CoatSimError, ValueError):
    """Backward was given a tape that does not belong to the forward being differentiated"""


class MismatchBeyondBound(CoatSimError, ValueError):
    """Measured tape bytes differ from the analytic model by more than the scale overhead"""
