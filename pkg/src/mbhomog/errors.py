"""Exception hierarchy shared by all solver modules."""


class MbhomogError(Exception):
    """Base class for all package-specific failures."""


# geometry
class OutsideTube(MbhomogError):
    """Point lies (provably) outside the tubular neighborhood of the interface."""


class NoConvergence(MbhomogError):
    """An iterative solve (projection, inversion, root finding) did not converge."""


class DegenerateGradient(MbhomogError):
    """The implicit function's gradient is numerically zero where a normal is needed."""


class EmptyTiling(MbhomogError):
    """No full epsilon-cell fits inside the macroscopic box."""


# motion
class TubeExit(MbhomogError):
    """An interface sample left the tubular neighborhood during integration."""


class StepTooLarge(MbhomogError):
    """Requested time step violates the tube-crossing safety bound."""


class NotInvertibleYet(MbhomogError):
    """The ||Dy - I|| <= 1/4 invertibility certificate fails at the requested time."""


# hanzawa
class SlopeCertificateFailed(MbhomogError):
    """The height-root slope exceeded -1/3; carries the last certified data."""

    def __init__(self, message, t_fail=None, partial=None):
        super().__init__(message)
        self.t_fail = t_fail
        self.partial = partial


class NormalsNearOrthogonal(MbhomogError):
    """Moved and reference normals differ too much for the surface-gradient formula."""


class BoundViolated(MbhomogError):
    """A certified transform bound (||Ds|| <= 2, det > 0, ...) failed on samples."""


# unfolding
class ResolutionTooCoarse(MbhomogError):
    """Grid field does not resolve the requested micro grid per cell."""


class GridMismatch(MbhomogError):
    """Fields in a comparison do not share compatible grids."""


# cell / solvers
class SolverDiverged(MbhomogError):
    """A linear or nonlinear PDE solve failed to reach its residual target."""


class MeshTooCoarse(MbhomogError):
    """Estimated discretization error of a cell solve exceeds the configured limit."""


class GradientUnavailable(MbhomogError):
    """A micro field lacks the gradient data needed for a surface flux."""


class InclusionEscape(MbhomogError):
    """The evolving inclusion reached the cell boundary."""


class MinRadiusReached(MbhomogError):
    """The shrinking inclusion hit the minimum-size guard (topology change forbidden)."""


# cli / persistence
class ConfigInvalid(MbhomogError):
    """Scenario configuration failed validation; message carries the field path."""


class CertificateFailed(MbhomogError):
    """A scenario run ended with a failed certificate; partial outputs were kept."""


class CacheCorrupt(MbhomogError):
    """A tensor-cache entry failed its content hash and was quarantined."""
