"""Exception types shared across the package."""


class StereoBevError(Exception):
    """Base class for all package errors."""


class NonPositiveDepthError(StereoBevError):
    """Raised when a projection or conversion requires depth > 0."""


class NonPositiveDisparityError(StereoBevError):
    """Raised when a disparity-to-depth conversion receives d <= 0."""


class InvalidSpecError(StereoBevError, ValueError):
    """Raised for malformed voxel grid specifications."""


class IndexOutOfBoundsError(StereoBevError, IndexError):
    """Raised for voxel indices outside the grid."""


class ShapeMismatchError(StereoBevError, ValueError):
    """Raised when tensor or grid shapes are incompatible."""


class RigMismatchError(StereoBevError, ValueError):
    """Raised when a camera rig does not match the feature-map resolution."""


class InvalidConfigError(StereoBevError, ValueError):
    """Raised for inconsistent network configurations."""


class NotScalarError(StereoBevError):
    """Raised when backward() is called on a non-scalar tensor."""


class DoubleBackwardError(StereoBevError):
    """Raised when backward() is called twice on the same graph."""


class DisconnectedGraphWarning(UserWarning):
    """Emitted when a loss is not connected to any trainable tensor."""


class DegenerateBoxError(StereoBevError, ValueError):
    """Raised for boxes with non-positive width or height."""


class NoGroundTruthError(StereoBevError):
    """Raised when average precision is requested without ground truth."""


class MissingKeyError(StereoBevError, KeyError):
    """Raised when a calibration file lacks a required entry."""


class MalformedMatrixError(StereoBevError, ValueError):
    """Raised when a calibration matrix cannot be parsed."""


class MalformedLineError(StereoBevError, ValueError):
    """Raised when a label line cannot be parsed."""


class TruncatedFileError(StereoBevError, ValueError):
    """Raised when a binary point cloud has a partial trailing record."""


class EmptyDatasetError(StereoBevError, ValueError):
    """Raised when training is started on an empty dataset."""


class DivergedLossError(StereoBevError):
    """Raised when a training loss becomes NaN or infinite."""


class CheckpointMismatchError(StereoBevError, ValueError):
    """Raised when checkpoint contents do not match the model."""


class OutOfRangeError(StereoBevError, ValueError):
    """Raised for epoch indices outside a training schedule."""
