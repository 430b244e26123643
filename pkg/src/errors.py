"""
Exception hierarchy for the segmentation kit.

Library code raises these; only the CLI turns them into exit codes.
"""


class KitError(Exception):
    """Base class for every error the kit raises on purpose."""


class ConfigError(KitError):
    """Invalid or inconsistent configuration (unknown key, bad value, broken invariant)."""


class ShapeError(KitError):
    """Tensor shapes or spatial extents that an operation cannot accept."""


class NonFiniteError(KitError):
    """NaN or Inf produced by an op, a gradient, or a loss."""


class LabelRangeError(KitError):
    """A target id outside [0, K) that is not the ignore sentinel."""


class GradCheckError(KitError):
    """Finite-difference check could not be carried out."""


class T4FormatError(KitError):
    """Malformed T4 container."""


class BadMagicError(T4FormatError):
    pass


class TruncatedPayloadError(T4FormatError):
    pass


class UnknownDtypeError(T4FormatError):
    pass


class DatasetError(KitError):
    """Missing or inconsistent dataset files."""


class TrainingDivergedError(KitError):
    """Loss went non-finite during training."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class NoScoredClassesError(KitError):
    """Every class has an empty union, so mIoU is undefined."""


class EmptyTargetWarning(UserWarning):
    """All target positions were ignore_index; the loss is reported as 0."""
