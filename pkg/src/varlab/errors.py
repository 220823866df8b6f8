"""Exception hierarchy shared by all varlab modules."""

from __future__ import annotations


class VarlabError(Exception):
    """Base class for every error raised by varlab."""


class ExprSyntaxError(VarlabError, ValueError):
    """Malformed expression text; ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int, text: str = ""):
        self.offset = offset
        self.text = text
        super().__init__(f"{message} at offset {offset}")


class UnknownIdentifierError(ExprSyntaxError):
    pass


class VariableIndexError(ExprSyntaxError):
    pass


class SingularEvaluationError(VarlabError, ArithmeticError):
    """Division by zero, log of a non-positive number, or a non-finite result."""


class DimensionError(VarlabError, ValueError):
    pass


class SmoothnessError(VarlabError):
    """A field's declared smoothness grade is too low for the requested operation."""


class BlowUpError(VarlabError):
    """Integration produced a non-finite state."""

    def __init__(self, time: float):
        self.time = time
        super().__init__(f"non-finite state at t={time:.17g}")


class GridMismatchError(VarlabError, ValueError):
    pass


class WindowError(VarlabError, ValueError):
    """A variation window does not fit before the chosen time, or windows overlap."""


class CertificationError(VarlabError):
    """A perturbed control leaves the control set."""


class CancellationError(VarlabError):
    """Iterated-integral coefficients that should vanish do not."""


class InfeasibleEndpointError(VarlabError):
    def __init__(self, residual: float):
        self.residual = residual
        super().__init__(f"endpoint violates target constraint (residual {residual:.3e})")


class ConfigError(VarlabError, ValueError):
    """Problem config could not be loaded; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")
