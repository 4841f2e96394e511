"""Exception hierarchy shared across the package."""


class HopmixerError(Exception):
    """Base class for all library errors."""


class DimensionError(HopmixerError, ValueError):
    """Array shapes do not line up."""


class ConfigurationError(HopmixerError, ValueError):
    """A network or block is configured in a way the operation cannot handle."""


class NumericError(HopmixerError, ArithmeticError):
    """A computation produced a non-finite value."""


class SingularityError(NumericError):
    """Normalization of a constant input with ``eps == 0``."""


class DivergenceError(NumericError):
    """Integration or training produced a non-finite state.

    ``step`` is the integration step (or epoch) at which it happened.
    """

    def __init__(self, message: str, step: int | None = None, layer: int | None = None):
        super().__init__(message)
        self.step = step
        self.layer = layer
