"""Shared exception types."""


class InvalidRegionError(ValueError):
    """Exterior/interior region does not fit inside the periodic box."""


class UnderResolvedError(ValueError):
    """Requested operation is not resolved by the grid (e.g. kernel at tiny t)."""


class CoverageError(ValueError):
    """A trajectory does not cover the requested time interval."""


class QuadratureError(ValueError):
    """A quadrature failed its self-consistency (node-doubling) check."""


class DivergedError(RuntimeError):
    """An iterative solve diverged; carries diagnostic data."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
