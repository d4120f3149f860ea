"""Exception types shared across the package."""


class CgcaError(Exception):
    """Base class for all package-specific errors."""


class EmptyStateError(CgcaError):
    """An operation required occupied cells but the state has none."""


class OutOfBoundsError(CgcaError):
    """A point or cell index falls outside the configured grid bounds."""


class ShapeMismatchError(CgcaError):
    """An array does not have the shape the operation requires."""


class StaleTapeError(CgcaError):
    """Backward was called on a tape recorded before a parameter update."""


class NonFiniteGradientError(CgcaError):
    """A gradient buffer contains NaN or inf; the optimizer step is aborted."""


class NonFiniteLossError(CgcaError):
    """A training loss evaluated to NaN or inf."""


class ChainDiedError(CgcaError):
    """An intermediate chain state became empty.

    Carries the step index and the last non-empty state so callers that
    tolerate dead chains can recover it.
    """

    def __init__(self, step, last_state=None):
        super().__init__(f"chain state became empty at step {step}")
        self.step = step
        self.last_state = last_state


class DomainError(CgcaError):
    """A probability or scale argument lies outside its valid range."""


class DomainMismatchError(CgcaError):
    """Two per-cell structures do not share the same cell domain."""


class NotSaturatedError(CgcaError):
    """The final-step loss was invoked with an infusion rate below 1."""


class EmptyQuerySetError(CgcaError):
    """A reconstruction loss was given no query points."""


class SequenceNotConvergedError(CgcaError):
    """A bound evaluation requires the sequence to end at the target state."""


class NoSurfaceCellsError(CgcaError):
    """Encoder pruning removed every sample; no surface cell remains."""


class TrainingDivergedError(CgcaError):
    """Training ended with a higher loss than it started with."""


class EmptyCloudError(CgcaError):
    """A point-set metric was given an empty cloud."""


class NeedTwoError(CgcaError):
    """Pairwise diversity needs at least two completions."""


class MisalignedError(CgcaError):
    """Per-input completion lists and ground truths differ in length."""


class FormatError(CgcaError):
    """A file does not carry the expected magic or version."""
