"""Exception hierarchy shared across the package."""


class HomotrajError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(HomotrajError):
    """A scene point lies on or behind the camera plane."""


class DegenerateConfiguration(HomotrajError):
    """Correspondences do not constrain a projective map (collinear/coincident)."""


class NotRotationSimilar(HomotrajError):
    """An infinite homography whose spectrum is not {1, e^{+i theta}, e^{-i theta}}."""


class SingularMatrix(HomotrajError):
    pass


class NearHalfTurn(HomotrajError):
    """Rotation angle too close to pi for a well-posed eigenvector pairing."""

    def __init__(self, theta: float):
        super().__init__(f"rotation angle {theta:.6f} rad is too close to pi")
        self.theta = theta


class InvalidDepthRatio(HomotrajError):
    pass


class ScaleStatusError(HomotrajError):
    """A projective-scale homography was passed where metric scale is required."""


class NumericalBlowup(HomotrajError):
    """A planned point has (near) zero homogeneous scale, i.e. sits at infinity."""


class RankDeficient(HomotrajError):
    def __init__(self, message: str, unobservable=None):
        super().__init__(message)
        self.unobservable = unobservable


class ImplausibleHandEyeTerm(HomotrajError):
    pass


class InsufficientExcitation(HomotrajError):
    pass


class Deadband(HomotrajError):
    """Broyden update skipped because the motion increment is too small."""


class PlanningFailed(HomotrajError):
    pass


class Diverged(HomotrajError):
    pass
