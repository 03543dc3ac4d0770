"""Exception types raised by the collar numerics."""

from typing import Optional, Tuple


class CollarError(Exception):
    """Base class for every numeric failure the library reports."""


class DomainError(CollarError, ValueError):
    pass


class SectionTypeError(CollarError, TypeError):
    pass


class AccuracyError(CollarError):
    def __init__(self, message: str, estimates: Tuple[float, float]):
        super().__init__(f"{message} (last estimates: {estimates[0]!r}, {estimates[1]!r})")
        self.estimates = estimates


class OverflowModeError(CollarError, OverflowError):
    def __init__(self, k: int, exponent: float):
        super().__init__(f"Mode k={k} overflows after exponent combination (exponent {exponent:.3f})")
        self.k = k
        self.exponent = exponent


class AliasingError(CollarError):
    pass


class SingularityError(CollarError):
    pass


class ConditioningError(CollarError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition number {condition:.3e}); try a smaller k_max")
        self.condition = condition


class DecompositionError(CollarError):
    def __init__(self, message: str, location: Optional[Tuple[float, float]] = None):
        if location is not None:
            message = f"{message} at rho={location[0]:.6f}, theta={location[1]:.6f}"
        super().__init__(message)
        self.location = location
