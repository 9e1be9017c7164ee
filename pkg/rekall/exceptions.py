"""
Exception hierarchy for rekall.

Errors describing bad inputs subclass :class:`ValueError` as well, so callers that
only catch the built-in keep working.
"""

from pathlib import Path


class RekallError(Exception):
    """Base class for every rekall error."""


class ConfigurationError(RekallError, ValueError):
    """Run configuration is inconsistent."""


class DatasetError(RekallError, ValueError):
    """A dataset cannot be found, read or partitioned."""


class TaskStreamError(RekallError, ValueError):
    """A task or task stream violates its invariants."""


class SamplingError(RekallError, ValueError):
    """A batch cannot be drawn from a split."""


class ShapeMismatchError(RekallError, ValueError):
    """Tensor shapes do not match what an operation expects."""


class NonFiniteError(RekallError, ArithmeticError):
    """A loss or activation became NaN or infinite."""


class GeneratorDivergenceError(NonFiniteError):
    """The replay generator loss is no longer finite."""


class TrainingDivergedError(NonFiniteError):
    """
    The student loss is no longer finite.

    :ivar last_checkpoint: Last checkpoint written before divergence, if any
    :vartype last_checkpoint: Optional[Path]
    """

    def __init__(self, message: str, last_checkpoint: Path | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CentroidStoreError(RekallError, ValueError):
    """Centroid store misuse (overwrite, empty store, corrupt file)."""


class SeparabilityError(RekallError, ValueError):
    """Class sizes are too small for a separability report."""


class ZeroShotViolationError(RekallError):
    """A previous task's training data was read while training a later task."""


class TeacherMutationError(RekallError):
    """The frozen teacher's parameters changed during a task."""


class TrainerStateError(RekallError):
    """Tasks arrive out of order or the teacher is missing."""


class CheckpointError(RekallError):
    """A checkpoint cannot be written or read."""


class CheckpointVersionError(CheckpointError):
    """A checkpoint was written with an incompatible schema version."""


class EvaluationError(RekallError, ValueError):
    """Evaluation preconditions are not met."""
