"""Exception hierarchy shared by all renderloc modules."""


class RenderlocError(Exception):
    """Base class for all errors raised by this package."""


# -- geometry ------------------------------------------------------------

class BehindCamera(RenderlocError):
    """Point has non-positive depth in the camera frame."""


class InvalidDepth(RenderlocError):
    """Depth is non-positive, NaN, or the empty-pixel sentinel."""


class DegenerateGravity(RenderlocError):
    """Reported gravity vector is too close to zero to define a direction."""


# -- mesh I/O ------------------------------------------------------------

class ParseError(RenderlocError):
    """Malformed mesh or match file. Carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedFormat(RenderlocError):
    """File extension / magic not recognized as OBJ or PLY."""


class EmptyMesh(RenderlocError):
    """Mesh file contains no triangles."""


# -- matching ------------------------------------------------------------

class ImageTooSmall(RenderlocError):
    """Image below the minimum size for feature detection."""


class InsufficientOverlap(RenderlocError):
    """Too few co-visible pixels between the two views to form matches."""


class OutOfBounds(RenderlocError):
    """Match coordinates outside the image. Carries the offending row."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


# -- pose solving --------------------------------------------------------

class CollinearPoints(RenderlocError):
    """The three world points of a minimal sample are (near-)collinear."""


class NoRealSolution(RenderlocError):
    """The resection polynomial has no usable real root."""


class InsufficientInliers(RenderlocError):
    """Not enough inliers to run nonlinear refinement."""


class TooFewCorrespondences(RenderlocError):
    """Fewer correspondences than the minimal sample needs."""


class NoModelFound(RenderlocError):
    """RANSAC exhausted its budget without a model above min_inliers."""


# -- pipeline ------------------------------------------------------------

class NoFloorFound(RenderlocError):
    """Vertical column at the prior position does not intersect the mesh."""


class MatchingFailed(RenderlocError):
    """No rendered seed produced enough matches to attempt a solve."""


# -- benchmark -----------------------------------------------------------

class MissingGroundTruth(RenderlocError):
    """Recall requested for a result without a ground-truth pose."""


class SceneTooSmall(RenderlocError):
    """Pose sampling kept rejecting; the scene cannot host the benchmark."""


class ConfigError(RenderlocError):
    """Invalid or incomplete run configuration."""
