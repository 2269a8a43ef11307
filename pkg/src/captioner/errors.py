"""Exception hierarchy shared by every module."""


class CaptionerError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(CaptionerError, ValueError):
    """An input broke an operation's precondition (shape, range, format)."""


class TrainingDiverged(CaptionerError):
    """A non-finite loss or gradient appeared during training."""

    def __init__(self, message, step=None, example_id=None):
        super().__init__(message)
        self.step = step
        self.example_id = example_id


class CheckpointError(CaptionerError):
    """A checkpoint file is corrupt, truncated or incompatible."""


class CheckpointVersionError(CheckpointError):
    pass


class VocabularyMismatch(CheckpointError):
    pass


class DataFormatError(CaptionerError, ValueError):
    """A line-delimited input file failed to parse or validate."""

    def __init__(self, message, line=None, record_id=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.record_id = record_id
