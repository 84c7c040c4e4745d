"""Exception hierarchy shared by all bevkit modules."""


class BevkitError(Exception):
    """Base class for all bevkit errors."""


class NonPositiveDepth(BevkitError):
    """A 3D point with z <= 0 was passed to a perspective projection."""


class DegenerateConfiguration(BevkitError):
    """The camera/ground configuration induces a singular homography."""


class InvalidGrid(BevkitError):
    """The BEV grid contains cells at non-positive depth."""


class NonPositiveLambda(BevkitError):
    """The sensitivity weighting constant must be > 0."""


class ZeroFrequencyClass(BevkitError):
    """A class with zero pixel frequency cannot be weighted."""


class UnknownClass(BevkitError):
    """A label map contains a class missing from the class table."""


class MissingPose(BevkitError):
    """A point-cloud frame has no ego pose."""


class MissingKernel(BevkitError):
    """A class present in the raster has no morphology kernel entry."""


class CropOutOfBounds(BevkitError):
    """The requested crop extends beyond the source raster."""


class UnmappedClass(BevkitError):
    """A frontal-view class is missing from the vertical/flat grouping."""


class ShapeMismatch(BevkitError):
    """Raster shapes of related inputs disagree."""


class GridMismatch(BevkitError):
    """Two maps being compared live on different grids or class tables."""


class NoValidPixels(BevkitError):
    """A loss or metric was requested over an empty pixel set."""


class InfeasibleSpec(BevkitError):
    """Synthetic scene objects could not be placed without overlap."""


class MissingInput(BevkitError):
    """A command was invoked without a required input."""


class FrameMismatch(BevkitError):
    """Prediction and ground-truth directories contain unpaired frames."""
