from __future__ import annotations


class ParameterDomainError(ValueError):
    """A process parameter or time lies outside its admissible range."""


class GridError(ValueError):
    pass


class GridMismatchError(GridError):
    pass


class QuadratureSchemeError(ValueError):
    pass


class NonPSDKernelError(RuntimeError):
    def __init__(self, grid_size: int, min_eigenvalue: float) -> None:
        super().__init__(
            f"covariance matrix on {grid_size} points is not positive semidefinite "
            f"after the full jitter ladder (minimum eigenvalue estimate {min_eigenvalue:.3e})"
        )
        self.grid_size = grid_size
        self.min_eigenvalue = min_eigenvalue


class ConfigError(ValueError):
    pass


class ArtifactError(OSError):
    pass
