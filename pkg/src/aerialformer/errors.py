"""Exception types raised across the package."""


class AerialFormerError(Exception):
    """Base class for all package errors."""


class ShapeError(AerialFormerError, ValueError):
    """Operand shapes are incompatible for an operation."""


class RankError(ShapeError):
    """A tensor has the wrong number of dimensions (e.g. non-scalar loss)."""


class GeometryError(AerialFormerError, ValueError):
    """Spatial sizes do not satisfy a layer's divisibility or size rules."""


class ConfigError(AerialFormerError, ValueError):
    """A configuration value violates its invariants."""


class WiringError(AerialFormerError, ValueError):
    """Two connected layers disagree on channel counts or spatial size."""


class UninitializedStatsError(AerialFormerError, RuntimeError):
    """BatchNorm used in inference mode before any running statistics exist."""


class DataError(AerialFormerError, ValueError):
    """Input data (images, masks, manifests) is malformed."""


class TrainingError(AerialFormerError, RuntimeError):
    """Training cannot proceed (missing gradient, non-finite loss, ...)."""
