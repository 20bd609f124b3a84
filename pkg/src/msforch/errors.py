"""Exception types raised by the mesh, assembly and solver layers."""


class DegenerateElementError(ValueError):
    """Bilinear element map has a non-positive Jacobian determinant."""


class SingularCornerError(ValueError):
    """The two edge normals meeting at a corner are parallel."""


class AssemblyError(RuntimeError):
    """An assembled velocity block failed a structural or definiteness check."""


class SingularSystemError(RuntimeError):
    """A saddle-point or pressure system is singular (e.g. closed no-flow box)."""


class LinearSolverError(RuntimeError):
    """An iterative linear solve did not reach the requested tolerance."""

    def __init__(self, message: str, final_residual: float | None = None):
        super().__init__(message)
        self.final_residual = final_residual


class ConfigurationError(ValueError):
    """Inconsistent run configuration, e.g. an unlabeled boundary edge."""
