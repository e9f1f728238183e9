"""Exception types raised across the package."""


class HtlgmmError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(HtlgmmError):
    """Input arrays have incompatible shapes."""


class NonFiniteInput(HtlgmmError):
    """An input array contains NaN or infinity."""


class SingularDesign(HtlgmmError):
    """Design matrix is rank deficient at the pivot threshold."""


class NonConvergence(HtlgmmError):
    """Iterative fit failed to converge within the iteration budget."""


class InvalidOutcome(HtlgmmError):
    """Logistic outcome vector contains values outside {0, 1}."""


class SingularGamma(HtlgmmError):
    """Reduced-model Jacobian block is not invertible."""


class NotPositiveDefinite(HtlgmmError):
    """Matrix has no usable positive spectrum after flooring."""


class NotSymmetric(HtlgmmError):
    """Matrix is not symmetric within tolerance."""


class NonPositiveGamma(HtlgmmError):
    """Adaptive-weight exponent must be strictly positive."""


class FoldTooSmall(HtlgmmError):
    """A cross-validation fold cannot support the requested split."""


class EmptySupport(HtlgmmError):
    """Post-selection inference requested on an empty selected set."""


class SingularBread(HtlgmmError):
    """Selected-block Gram matrix of the sandwich is singular."""


class InvalidPValue(HtlgmmError):
    """p-values must lie in [0, 1]."""


class SingleClass(HtlgmmError):
    """AUC requires both outcome classes to be present."""


class CalibrationFailure(HtlgmmError):
    """Effect-size calibration could not bracket the target."""


class SingularCombinedCovariance(HtlgmmError):
    """Combined covariance in the transportability test is singular."""


class IncompatibleExternal(HtlgmmError):
    """External summary dimension does not match the data partition."""


class ConfigError(HtlgmmError):
    """Invalid run configuration."""


class ParseError(HtlgmmError):
    """Malformed input file."""


class SchemaMismatch(HtlgmmError):
    """Column names in the inputs do not agree."""
