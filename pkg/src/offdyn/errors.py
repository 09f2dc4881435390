"""Exception types raised across the package."""


class OffDynError(Exception):
    pass


class TaskNameError(OffDynError, ValueError):
    pass


class UnknownFamily(TaskNameError):
    pass


class UnknownShiftType(TaskNameError):
    pass


class InvalidShiftLevel(TaskNameError):
    pass


class UnknownTask(TaskNameError):
    pass


class ShiftNotSupportedForFamily(OffDynError, ValueError):
    pass


class UnknownLayout(OffDynError, ValueError):
    pass


class EmptyBuffer(OffDynError, RuntimeError):
    pass


class EmptyBatch(OffDynError, ValueError):
    pass


class NonFiniteLoss(OffDynError, FloatingPointError):
    pass


class EnsembleUntrained(OffDynError, RuntimeError):
    pass


class CVAEUntrained(OffDynError, RuntimeError):
    pass


class MissingReference(OffDynError, KeyError):
    pass


class DegenerateReference(OffDynError, ValueError):
    pass


class UnknownAlgorithm(OffDynError, ValueError):
    pass


class IllegalPairing(OffDynError, ValueError):
    pass


class MissingDataset(OffDynError, FileNotFoundError):
    pass


class CorruptFile(OffDynError, ValueError):
    pass


class SchemaMismatch(OffDynError, ValueError):
    pass


class NoSuccess(OffDynError, RuntimeError):
    pass


class ShapeMismatch(OffDynError, ValueError):
    pass


class UnwritablePath(OffDynError, OSError):
    pass


class DegenerateBatchWarning(RuntimeWarning):
    """All weights in a batch coincided; uniform weights were used instead."""


class AllMasked(RuntimeWarning):
    """Every sample in a batch failed the dynamics-support test; the Bellman term was skipped."""
