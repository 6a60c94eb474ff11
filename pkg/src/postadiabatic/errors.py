"""Exception hierarchy shared by all modules.

Each exception class carries the process exit code the command line front
end returns when the error escapes a command.
"""

from __future__ import annotations

from typing import Any

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_UNSUPPORTED = 4


class PostAdiabaticError(Exception):
    """Base class; ``details`` holds machine-readable context."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.details = details


class ValidationError(PostAdiabaticError):
    """Malformed input: bad scenario keys, mismatched dimensions, non-Hermitian data."""

    exit_code = EXIT_VALIDATION

    def __init__(self, message: str, pointer: str = "", **details: Any) -> None:
        super().__init__(message, **details)
        self.pointer = pointer

    def __str__(self) -> str:
        base = super().__str__()
        return f"{base} (at {self.pointer})" if self.pointer else base


class NumericalError(PostAdiabaticError):
    """A computation failed or left its domain of validity."""

    exit_code = EXIT_NUMERICAL


class DegeneracyError(NumericalError):
    """Two adiabatic levels came closer than the gap tolerance."""

    def __init__(self, message: str, q=None, pair=None, gap=None) -> None:
        super().__init__(message, q=q, pair=pair, gap=gap)
        self.q = q
        self.pair = pair
        self.gap = gap


class AmbiguousAssociationError(NumericalError):
    """Level tracking between neighbouring frames could not decide an assignment."""


class SingularMetricError(NumericalError):
    """The effective metric (or the symplectic block Z) is numerically singular.

    ``partial`` holds a trajectory computed up to the singular point, if any.
    """

    def __init__(self, message: str, partial=None, **details: Any) -> None:
        super().__init__(message, **details)
        self.partial = partial


class IntegrationError(NumericalError):
    """An ODE integration failed; ``partial`` holds what was computed before the failure."""

    def __init__(self, message: str, partial=None, **details: Any) -> None:
        super().__init__(message, **details)
        self.partial = partial


class ConstraintError(NumericalError):
    """The odd-K third-order constraint is violated beyond tolerance."""

    def __init__(self, message: str, residual: float | None = None) -> None:
        super().__init__(message, residual=residual)
        self.residual = residual


class UnsupportedConfigurationError(PostAdiabaticError):
    """Requested combination of order, dimension and gauge is outside the implemented scope."""

    exit_code = EXIT_UNSUPPORTED
