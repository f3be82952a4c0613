"""Exception types shared across the toolkit."""


class SelfDiffError(Exception):
    """Base class for toolkit errors."""


class DomainError(SelfDiffError, ValueError):
    """A time/noise-level argument lies outside the formulation's domain."""


class ShapeError(SelfDiffError, ValueError):
    """Array arguments have incompatible shapes."""


class ConfigError(SelfDiffError, ValueError):
    """A configuration value is invalid or inconsistent."""


class SingularityError(SelfDiffError, ArithmeticError):
    """A conversion is not defined at this point (division by a vanishing scale)."""


class StructureError(SelfDiffError, ValueError):
    """Two parameter sets are not isomorphic."""


class NumericError(SelfDiffError, ArithmeticError):
    """A numerical routine failed beyond tolerance (e.g. non-PSD covariance)."""


class DegenerateLabelError(SelfDiffError, ValueError):
    """Labels are degenerate (e.g. a single class) and the operation is undefined."""


class TransformError(SelfDiffError, ValueError):
    """An augmentation transform is degenerate (non-invertible affine)."""


class TrainingDiverged(SelfDiffError, RuntimeError):
    """Training aborted after sustained non-finite losses."""
