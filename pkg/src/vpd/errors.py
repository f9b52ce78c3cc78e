"""Exception types shared across the toolkit."""


class VPDError(Exception):
    """Base class for all toolkit errors."""


class DegeneratePose(VPDError):
    """Pose has no usable geometry (zero scale or zero-length bone)."""


class DimensionMismatch(VPDError):
    """Vector or matrix dimensions do not agree with the expected layout."""


class EmptySequence(VPDError):
    """An operation received a sequence with no frames."""


class EmptyBatch(VPDError):
    """A loss or update was requested on an empty batch."""


class EmptySelection(VPDError):
    """No frame passed the weak-supervision selection criteria."""


class EmptyBBox(VPDError):
    """Bounding box has zero width or height."""


class CorruptHeader(VPDError):
    """A binary store file is truncated or has a bad magic/header."""


class UnknownClass(VPDError):
    """Motion class id outside the configured class set."""


class BehindCamera(VPDError):
    """3D point projects from behind the camera plane."""


class OutOfBounds(VPDError):
    """Pose lies outside the target image bounds."""


class InsufficientViews(VPDError):
    """Fewer camera views than required for multi-view training."""


class InsufficientPositives(VPDError):
    """Not enough positive frames to train the detector folds."""


class MissingTeacherModel(VPDError):
    """A chirality flip of an embedded target needs the embedder model."""


class MissingFlippedFeatures(VPDError):
    """Inference requires the horizontally-flipped feature sequence."""


class ShapeMismatch(VPDError):
    """Tensor shape does not match the model's expected input."""


class SingleClass(VPDError):
    """Classifier training needs at least two classes."""


class EmptyTrainingSet(VPDError):
    """No training examples were provided."""


class NoTestData(VPDError):
    """Evaluation requested without any test examples."""


class AllInfeasible(VPDError):
    """Every candidate alignment is infeasible under the slope constraint."""


class NoGroundTruth(VPDError):
    """Detection evaluation needs at least one ground-truth interval."""


class BadConfig(VPDError):
    """Run configuration is malformed or contains unknown keys."""


class MissingArtifact(VPDError):
    """A pipeline stage input does not exist on disk."""


class StaleManifest(VPDError):
    """A manifest's recorded hashes no longer match the files on disk."""
