"""Exception types raised across the package."""


class PsrpError(Exception):
    """Base class for all package errors."""


class ConfigError(PsrpError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(PsrpError, ValueError):
    """Tensor or image has an unsupported shape."""


class FormatError(PsrpError, ValueError):
    """Malformed dataset, results or checkpoint file."""


class ContractError(PsrpError, ValueError):
    """A function was called with arguments violating its contract."""


class DivergenceError(PsrpError, RuntimeError):
    """Training diverged: non-finite loss or collapsed box margins."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"training diverged at iteration {iteration}")
