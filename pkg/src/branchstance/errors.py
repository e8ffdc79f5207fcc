"""Exception hierarchy shared across the toolkit."""


class BranchStanceError(Exception):
    """Base class for all toolkit errors."""


# --- thread construction ---

class ThreadError(BranchStanceError):
    pass


class NoRoot(ThreadError):
    pass


class MultipleRoots(ThreadError):
    pass


class DanglingParent(ThreadError):
    pass


class CycleDetected(ThreadError):
    pass


class UnknownInstance(ThreadError):
    pass


# --- dataset I/O ---

class DataError(BranchStanceError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(DataError):
    def __init__(self, message: str, field: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message} (field: {field})")
        self.field = field
        self.line = line


# --- encoding ---

class EncodingError(BranchStanceError):
    pass


class TokenizerFailure(EncodingError):
    pass


class EncoderFailure(EncodingError):
    pass


class ShapeMismatch(EncodingError):
    pass


class BudgetImpossible(EncodingError):
    pass


# --- model / training ---

class ModelError(BranchStanceError):
    pass


class VersionMismatch(ModelError):
    pass


class CorruptCheckpoint(ModelError):
    pass


class EmptyTrainSet(ModelError):
    pass


class EmptyTestSet(ModelError):
    pass


class NonFiniteLoss(ModelError):
    pass


class LengthMismatch(ModelError):
    pass


class SegmenterFailure(BranchStanceError):
    pass


# --- attribution ---

class AttributionError(BranchStanceError):
    pass


class SpanOutOfRange(AttributionError):
    pass


class AlignmentFailure(AttributionError):
    pass


# --- annotation service ---

class AnnotationError(BranchStanceError):
    pass


class NoTasksRemaining(AnnotationError):
    pass


class DuplicateSubmission(AnnotationError):
    pass


class UnknownTask(AnnotationError):
    pass


class InvalidLabel(AnnotationError):
    pass


class InsufficientData(AnnotationError):
    pass


class UnresolvedInstances(AnnotationError):
    def __init__(self, instance_ids):
        super().__init__(f"unresolved instances: {sorted(instance_ids)}")
        self.instance_ids = list(instance_ids)
