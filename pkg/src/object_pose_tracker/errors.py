from pathlib import Path
from typing import Optional, Union


class TrackerError(Exception):
    """Base class for every error raised by the tracking engine."""


class ConfigError(TrackerError):
    """Run configuration could not be loaded or validated."""


class IngestionError(TrackerError):
    """RGB-D inputs with inconsistent dimensions."""


class ProviderError(TrackerError):
    """A mask or keypoint provider could not serve a frame."""


class EmptyMaskError(ProviderError):
    """Segmentation produced no object region."""


class DegenerateSampleError(TrackerError):
    """Point pairs are collinear or coincident; no unique rigid fit exists."""


class RegistrationFailure(TrackerError):
    """RANSAC could not find a hypothesis with enough inliers."""


class GraphUnconstrainedError(TrackerError):
    """Pose graph has no edges to optimize against."""


class InitializationError(TrackerError):
    """Tracker cannot be (re-)initialized with the given input."""


class SequencingError(TrackerError):
    """Frames were submitted out of order."""


class RenderError(TrackerError):
    """Synthetic scene cannot be rendered at the requested timestamp."""


class DatasetError(TrackerError):
    """Dataset directory is malformed; ``path`` names the offending file."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None):
        super().__init__(message)
        self.path = Path(path) if path is not None else None


class TrackingDegradedWarning(UserWarning):
    """A frame was coasted on the previous pose."""


class DegradedSolveWarning(UserWarning):
    """PCG stopped on a breakdown and returned its best iterate."""


class CorrespondenceShortfallWarning(UserWarning):
    """Fewer co-visible points than requested were available."""
