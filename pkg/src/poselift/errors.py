"""Exception types shared across the package."""


class PoseLiftError(Exception):
    """Base class for all package errors."""


class DegeneratePose(PoseLiftError):
    """Pose has no spatial extent (all joints coincide or zero variance)."""


class DegenerateReprojection(PoseLiftError):
    """Reprojected 2D pose has (near-)zero Frobenius norm."""


class ShapeMismatch(PoseLiftError):
    """Operands have incompatible shapes."""


class NonFiniteValue(PoseLiftError):
    """A forward computation produced NaN or Inf."""


class NonScalarLoss(PoseLiftError):
    """backward() was called on a non-scalar node."""


class NonFiniteGradient(PoseLiftError):
    """An optimizer step received NaN/Inf gradients."""


class InsufficientViews(PoseLiftError):
    """A multi-view operation needs at least two views."""


class RigGroupTooSmall(PoseLiftError):
    """Camera-consistency mixing needs >= 2 samples per rig group."""


class SingleViewSample(PoseLiftError):
    """Training requires every sample to have at least two views."""


class ParseError(PoseLiftError):
    """Dataset file failed to parse; message carries line number and field."""


class InconsistentJointCount(PoseLiftError):
    """Samples in one dataset disagree on the number of joints."""


class DuplicateCameraInSample(PoseLiftError):
    """A sample lists the same camera id twice."""


class EmptyEvalSet(PoseLiftError):
    """Metric requested over an empty evaluation set."""


class MissingGroundTruth(PoseLiftError):
    """Evaluation requires 3D ground truth in the dataset."""
