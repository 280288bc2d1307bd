"""Exception types used across the package.

The CLI maps these to exit codes: ConfigError -> 2, FileError -> 3,
NumericError -> 4.  Validation errors are ValueError subclasses so they
behave normally when the library is used directly.
"""


class FlowcastError(Exception):
    """Base class for all package errors."""


class ConfigError(FlowcastError, ValueError):
    """Bad or unknown run configuration (unknown key, unparsable value)."""


class FileError(FlowcastError, OSError):
    """Missing, corrupt, or mis-shaped artifact file."""


class BadMagic(FileError):
    """File does not start with the expected magic bytes."""


class TruncatedPayload(FileError):
    """File ends before the declared payload is complete."""


class ShapeMismatchOnLoad(FileError):
    """Stored tensor shapes disagree with the declared architecture."""


class NumericError(FlowcastError, ArithmeticError):
    """Numeric failure inside an algorithm (non-finite loss, singular solve)."""


class NonFiniteLoss(NumericError):
    """Training loss or gradient became NaN/Inf."""


class CholeskyFailure(NumericError):
    """Covariance factorization failed despite the nugget."""


class SingularInnovationCov(NumericError):
    """EnKF innovation covariance solve failed."""


class SingularInnovation(NumericError):
    """Kalman filter innovation covariance is not positive definite."""


class OptimizerFailure(NumericError):
    """No optimizer start produced a finite objective."""


class DegenerateResiduals(NumericError):
    """Residual fields are (numerically) all zero; nothing to fit."""


class UnstableConfig(ConfigError):
    """Simulator settings violate a stability bound."""


class ValidationError(FlowcastError, ValueError):
    """Invalid argument values or incompatible array shapes."""


class DegenerateFrame(ValidationError):
    """Frame standard deviation at or below the allowed floor."""


class BorderTooLarge(ValidationError):
    """Interior border swallows the whole grid."""


class NotPerfectSquare(ValidationError):
    """Basis size must be a perfect square."""


class DimensionMismatch(ValidationError):
    """Incompatible grid/array dimensions."""


# Same condition seen from the network side; kept as an alias on purpose.
ShapeMismatch = DimensionMismatch


class NonpositiveDiffusion(ValidationError):
    """Kernel diffusion parameter must be strictly positive."""


class OddSide(ValidationError):
    """2x2 max pooling needs even feature-map sides."""


class StaleCache(FlowcastError, RuntimeError):
    """Backward pass got a cache from a forward pass with older parameters."""


class EmptyBatch(ValidationError):
    """Minibatch index set is empty."""


class InsufficientFrames(ValidationError):
    """Not enough frames for the requested window/operation."""


class EmptyMask(ValidationError):
    """Scoring mask selects no pixels."""


class InvertedInterval(ValidationError):
    """Interval lower bound exceeds upper bound."""


class MismatchedCoverage(ValidationError):
    """Score reports cover different pixels/times and cannot be ratioed."""


class TooManyPixels(ValidationError):
    """Requested more observed pixels than the grid has."""
