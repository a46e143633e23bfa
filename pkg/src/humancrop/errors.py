"""Exception hierarchy.

Two broad families matter to callers: :class:`ValidationError` for bad
inputs (CLI exit code 2) and :class:`CropperError` for runtime failures
(CLI exit code 3).
"""


class CropperError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CropperError):
    """Invalid input: malformed boxes, configs, annotations, or arguments."""


class InvalidBoxError(ValidationError):
    """Box coordinates violate x1 < x2, y1 < y2 or lie outside the image."""


class EmptyCandidatesError(ValidationError):
    """Candidate generation produced no crops under the given parameters."""


class NoSubjectError(ValidationError):
    """Main-subject selection was asked to choose from an empty box list."""


class ShapeMismatchError(ValidationError):
    """Two grids that must share a shape do not."""


class AnnotationError(ValidationError):
    """An annotation file could not be parsed or fails schema validation."""


class ConfigError(ValidationError):
    """A model or schedule configuration violates its invariants."""


class CheckpointError(CropperError):
    """Base class for checkpoint load/save failures."""


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint version or stored config does not match expectations."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint archive is corrupt (digest mismatch or missing entries)."""


class TrainingDivergedError(CropperError):
    """Training produced a non-finite loss and was aborted."""
