"""Exception hierarchy shared across the package."""


class VPBError(Exception):
    """Base class for all package errors."""


class ValidationError(VPBError, ValueError):
    """Invalid input, configuration, or shape."""


class NumericalAbort(VPBError, RuntimeError):
    """A computation could not proceed (positivity loss, blow-up, non-convergence)."""


class ChargeNeutralityError(ValidationError):
    """Charge density with nonzero spatial mean on the torus."""

    def __init__(self, mean):
        self.mean = float(mean)
        super().__init__(f"charge density must have zero mean on the torus, got mean {self.mean:.3e}")


class TruncationError(ValidationError):
    """Requested operation needs polynomial degrees beyond the basis."""


class SingularOperatorError(NumericalAbort):
    def __init__(self, message, eigenvalues):
        self.eigenvalues = eigenvalues
        super().__init__(f"{message}; smallest eigenvalues {list(eigenvalues)}")


class QuadratureConvergenceError(NumericalAbort):
    def __init__(self, coarse, fine, tol):
        self.coarse = coarse
        self.fine = fine
        super().__init__(
            f"quadrature refinement disagreement {abs(fine - coarse):.3e} exceeds {tol:.1e} "
            f"(coarse {coarse!r}, fine {fine!r})"
        )


class PositivityError(NumericalAbort):
    """Full distribution became negative at a quadrature node."""


class BlowUpError(NumericalAbort):
    """Solution norm grew past the configured threshold."""


class CacheError(VPBError):
    """Corrupt or mismatched collision-operator cache file."""


class CacheHashMismatch(CacheError):
    pass
