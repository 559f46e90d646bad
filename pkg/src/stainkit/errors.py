"""Exception types shared across the toolkit."""


class StainkitError(Exception):
    """Base class for all stainkit errors."""


class SingularMatrixError(StainkitError):
    """Stain matrix is not invertible (condition number too large)."""


class NonSquareRotationError(StainkitError):
    """90/270 degree rotation requested on a non-square patch."""


class InsufficientTissueError(StainkitError):
    """Too few tissue pixels survive background thresholding to fit a profile."""


class DegeneratePlaneError(StainkitError):
    """OD pixel cloud is effectively rank-1; no stain plane can be estimated."""


class ProfileMismatchError(StainkitError):
    """Normalization profile has the wrong method for the requested operation."""


class ShapeMismatchError(StainkitError):
    """Array shapes are inconsistent with the operation's contract."""


class StaleCacheError(StainkitError):
    """backward() called without a preceding forward() on the same network."""


class EmptyDatasetError(StainkitError):
    """Operation requires at least one patch but the dataset is empty."""


class NonFiniteLossError(StainkitError):
    """Training loss became NaN or infinite."""


class UntrainedNetworkError(StainkitError):
    """Inference requested on a network whose weights were never trained/loaded."""


class TooFewDatasetsError(StainkitError):
    """Spread requires at least two dataset statistics."""
