"""Exception types shared across the package."""


class RoadSimError(Exception):
    """Base class for all package-specific errors."""


class InvariantViolation(RoadSimError):
    """A domain object failed validation (bad dims, non-unit quaternion, ...)."""


class BehindCamera(RoadSimError):
    """A point that must project in front of the camera fell behind it."""


class InsufficientKeypoints(RoadSimError):
    """Too few keypoint constraints to identify a 6-DoF pose correction."""


class NonFiniteResidual(RoadSimError):
    """Objective or gradient was NaN/Inf at the optimization start point."""


class EmptyRig(RoadSimError):
    """An operation needing at least one camera got an empty rig."""


class DimensionMismatch(RoadSimError):
    """Rasters that must share a shape do not."""


class DegenerateFit(RoadSimError):
    """Depth calibration has < 2 samples or a constant regressor."""


class EmptyEvaluation(RoadSimError):
    """Depth metrics requested over a region with no ground-truth pixels."""


class UnknownStage(RoadSimError):
    """A post-processing chain names a stage that is not registered."""


class StageFailure(RoadSimError):
    """A post-processing stage could not run (missing context, dead command)."""


class MissingFile(RoadSimError):
    """A file referenced by a scene does not exist."""


class ParseError(RoadSimError):
    """A scene file exists but could not be parsed."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


class SceneWriteError(RoadSimError):
    """Writing scene output failed (unwritable target, disk error, ...)."""


class ConfigError(RoadSimError):
    """Pipeline configuration is missing, malformed, or inconsistent."""
