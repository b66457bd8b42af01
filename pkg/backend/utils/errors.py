"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the process exit code the CLI maps it to.
"""
from typing import Optional


class ProcformerError(Exception):
    exit_code = 2

    def __init__(self, message: str, source: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.message = message
        self.source = source
        self.line = line

    def location(self) -> str:
        if self.source and self.line is not None:
            return f"{self.source}:{self.line}"
        return self.source or ""

    def __str__(self) -> str:
        where = self.location()
        return f"{where}: {self.message}" if where else self.message


# Input data (exit 2)

class EventLogError(ProcformerError):
    pass


class MissingColumn(EventLogError):
    pass


class BadTimestamp(EventLogError):
    pass


class EmptyLog(EventLogError):
    pass


class DegenerateSplit(EventLogError):
    pass


class FeatureError(ProcformerError):
    pass


class TraceTooShort(FeatureError):
    pass


class TraceTooLong(FeatureError):
    pass


class EmptyDataset(FeatureError):
    pass


class EmptyInput(FeatureError):
    pass


class EmptyTestSet(FeatureError):
    pass


class PrefixLongerThanMaxLen(ProcformerError):
    pass


# Tensor engine

class TensorError(ProcformerError):
    pass


class ShapeMismatch(TensorError):
    pass


class AllMasked(TensorError):
    pass


class NonScalarLoss(TensorError):
    pass


class BadTargetId(TensorError):
    pass


# Training (exit 3)

class TrainingError(ProcformerError):
    exit_code = 3


class DivergedLoss(TrainingError):
    def __init__(self, message: str, last_finite_epoch: Optional[int] = None):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


class NonFiniteGradient(TrainingError):
    def __init__(self, message: str, parameter: str):
        super().__init__(message)
        self.parameter = parameter


# Model file (exit 4)

class ModelFileError(ProcformerError):
    exit_code = 4


class VersionMismatch(ModelFileError):
    pass


class CorruptFile(ModelFileError):
    pass
