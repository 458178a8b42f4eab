"""Exception types shared across the package."""


class FinslerError(Exception):
    """Base class for all package errors."""


class ParameterError(FinslerError):
    """A constructor or operation argument violates its documented domain."""


class ChartDomainError(FinslerError):
    """A point lies outside the validity region of every available chart."""


class DegenerateDirectionError(FinslerError):
    """A tangent direction where F is not smooth (zero vector, or a zero
    factor block on product models)."""


class ConvexityError(FinslerError):
    """The fundamental tensor failed to be positive definite."""


class QuadratureError(FinslerError):
    """Successive quadrature refinements failed to agree within tolerance."""


class IntegrationError(FinslerError):
    """The adaptive integrator underflowed its minimum step size."""


class ShootingError(FinslerError):
    """Boundary-value geodesic solve did not converge (probable cut-locus
    crossing or unreachable target)."""


class RadiusError(FinslerError):
    """A requested radius exceeds the model's conservative injectivity bound."""


class SamplingError(FinslerError):
    """Invalid sampling budget or seed specification."""


class UnsupportedModelError(FinslerError):
    """The operation's preconditions exclude this model (non-compact,
    non-Berwald, unsupported dimension, ...)."""
