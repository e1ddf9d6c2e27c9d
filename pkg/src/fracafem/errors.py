"""Exception types shared across the package."""


class DataError(ValueError):
    """A data function produced a non-finite sample."""


class GeometryError(ValueError):
    """Degenerate or inconsistent geometry."""


class SolverDivergenceError(RuntimeError):
    """Iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"solver did not converge in {iterations} iterations "
            f"(relative residual {residual:.3e})"
        )


class NestingError(ValueError):
    """Two discrete fields were expected to live on nested spaces."""
