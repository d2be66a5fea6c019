"""Exception hierarchy shared by all ottrack modules."""


class OTTrackError(Exception):
    """Base class for every error raised by ottrack."""


class InvalidInput(OTTrackError, ValueError):
    """Input violates a documented precondition."""


class AllZeroDensity(InvalidInput):
    pass


class NegativeDensity(InvalidInput):
    pass


class UnnormalizedInput(InvalidInput):
    pass


class PointOutOfBounds(InvalidInput):
    pass


class MissingDensityValues(InvalidInput):
    pass


class DegenerateEnsemble(InvalidInput):
    pass


class NonPsdCovariance(InvalidInput):
    pass


class NonPsdInput(NonPsdCovariance):
    pass


class SingularCovariance(InvalidInput):
    pass


class SOutOfRange(InvalidInput):
    pass


class DimensionMismatch(InvalidInput):
    pass


class GeometryMismatch(InvalidInput):
    pass


class InfeasibleMarginals(InvalidInput):
    pass


class TooLarge(InvalidInput):
    pass


class UnequalWeights(InvalidInput):
    pass


class OutOfDomain(InvalidInput):
    pass


class BoundaryMass(InvalidInput):
    """Too much density sits near the edge of the box for zero-flux walls."""


class InfeasibleSteering(OTTrackError):
    """No affine state feedback realizes the requested Gaussian transport."""

    def __init__(self, report, horizon=None):
        self.report = report
        self.horizon = horizon
        where = "" if horizon is None else f" at horizon {horizon}"
        super().__init__(
            f"steering infeasible{where}: residual_mat={report.residual_mat:.3e}, "
            f"residual_vec={report.residual_vec:.3e}"
        )


class SolverStall(OTTrackError, RuntimeError):
    pass


class NotConverged(OTTrackError, RuntimeError):
    """Iterative solver hit its cap; ``partial`` holds the last iterate."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class BlowUp(OTTrackError, RuntimeError):
    pass
