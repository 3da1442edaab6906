"""Exception types raised across the reconstruction pipeline."""


class RefusionError(Exception):
    """Base class for all refusion errors."""


class InvalidProjectionError(RefusionError):
    """Point cannot be projected (non-positive depth)."""


class InvalidDepthError(RefusionError):
    """Non-positive depth passed where a valid depth is required."""


class UndefinedOverlapError(RefusionError):
    """Overlap ratio requested for a keyframe without valid depth."""


class StreamingContractError(RefusionError):
    """Block allocation requested outside the active streaming sphere."""


class VolumeInconsistencyError(RefusionError):
    """De-integration of a sample that was never integrated."""


class MalformedEventError(RefusionError):
    """Pose update event references an unknown anchor."""


class IngestionError(RefusionError):
    """Dataset is missing files or contains corrupt data."""


class EmptyInputError(RefusionError):
    """Metric computation over an empty mesh or point cloud."""


class EmptyModelError(EmptyInputError):
    """Completeness against an empty model: incompleteness is infinite."""


class DegenerateMeshError(RefusionError):
    """Mesh has no area to sample from."""


class IncompleteTrajectoryError(RefusionError):
    """Ground-truth trajectory does not cover every frame."""
