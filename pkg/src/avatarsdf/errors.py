"""Exception types raised across the package."""


class AvatarSDFError(Exception):
    """Base class for all package-specific errors."""


class SingularBlend(AvatarSDFError):
    """Blended bone matrix is numerically singular (|det| below threshold)."""


class DegenerateGradient(AvatarSDFError):
    """Field gradient vanished (query on or near the medial axis)."""


class SamplingFailed(AvatarSDFError):
    """Surface projection failed to converge for too many samples."""


class EmptyCloud(AvatarSDFError):
    """A point cloud argument was empty."""


class AllPointsFiltered(AvatarSDFError):
    """Canonicalization rejected every input point."""


class ShapeMismatch(AvatarSDFError):
    """Array shapes disagree with the declared parameter layout."""


class NonFiniteLoss(AvatarSDFError):
    """Training loss became NaN/Inf; a diagnostic snapshot was written."""

    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


class EmptyBatch(AvatarSDFError):
    """A training batch contained no points."""


class EmptyFinetuneSet(AvatarSDFError):
    """Fine-tuning was requested with zero frames."""


class EmptySurface(AvatarSDFError):
    """Iso-surface extraction found no sign change in the grid."""


class EmptyMesh(AvatarSDFError):
    """A mesh argument had no faces."""


class ConfigError(AvatarSDFError):
    """Invalid or inconsistent run configuration."""


class MissingArtifact(AvatarSDFError):
    """A required upstream artifact (dataset, net, bundle) is absent."""
