"""
Exception hierarchy for the gait residual pipeline.

Each family maps to its own process exit status so scripts driving the CLI
can tell bad data apart from a failed training run or a broken config.
"""

from typing import Optional

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4


class GaitError(Exception):
    """Base class for every expected failure."""
    exit_code = EXIT_UNEXPECTED


class ConfigError(GaitError):
    exit_code = EXIT_CONFIG


# ---------------------------------------------------
# DATA ERRORS
# ---------------------------------------------------
class DataError(GaitError):
    exit_code = EXIT_DATA


class MalformedFilename(DataError):
    def __init__(self, name: str):
        super().__init__(f"File name does not match <Ga|Ju|Si><Pt|Co><NN>_<WW>: {name}")
        self.name = name


class MalformedRow(DataError):
    def __init__(self, line_number: int, reason: str, path: Optional[str] = None):
        where = f"{path}:{line_number}" if path else f"line {line_number}"
        super().__init__(f"Malformed row at {where}: {reason}")
        self.line_number = line_number
        self.path = path


class EmptyFile(DataError):
    def __init__(self, path: str):
        super().__init__(f"Recording file has no data rows: {path}")
        self.path = path


class UnreadableFile(DataError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"Cannot read recording file {path}: {reason}")
        self.path = path


class NoRecordingsFound(DataError):
    def __init__(self, directory: str):
        super().__init__(f"No recording files found in {directory}")
        self.directory = directory


class RecordingTooShort(DataError):
    def __init__(self, length: int, required: int):
        super().__init__(f"Recording has {length} samples, at least {required} required")
        self.length = length
        self.required = required


class ZeroVarianceChannel(DataError):
    def __init__(self, channel: int):
        super().__init__(f"Channel {channel} has zero variance and cannot be normalized")
        self.channel = channel


class NoControlRecordings(DataError):
    def __init__(self, message: str = "No control recordings available for LP fitting"):
        super().__init__(message)


class TooFewSubjects(DataError):
    pass


class TooFewWindows(DataError):
    pass


class BundleFormatError(DataError):
    pass


class EmptyInput(DataError):
    pass


class SingleClass(DataError):
    def __init__(self, message: str = "AUC needs at least one positive and one negative label"):
        super().__init__(message)


# ---------------------------------------------------
# TRAINING / NUMERICAL ERRORS
# ---------------------------------------------------
class TrainingError(GaitError):
    exit_code = EXIT_TRAINING


class SingularSystem(TrainingError):
    def __init__(self, message: str = "Normal equations are not positive definite",
                 channel: Optional[int] = None):
        if channel is not None:
            message = f"{message} (channel {channel})"
        super().__init__(message)
        self.channel = channel


class OrderTooLarge(TrainingError):
    def __init__(self, length: int, order: int):
        super().__init__(f"Signal of length {length} is too short for LP order {order}")
        self.length = length
        self.order = order


class ShapeMismatch(TrainingError):
    pass


class MissingForwardContext(TrainingError):
    def __init__(self, layer: str):
        super().__init__(f"backward() called on {layer} before a training forward pass")
        self.layer = layer


class DegenerateBatch(TrainingError):
    pass


class DivergedTraining(TrainingError):
    def __init__(self, fold: Optional[int], epoch: int):
        where = f"fold {fold}" if fold is not None else "training"
        super().__init__(f"Loss became non-finite in {where} at epoch {epoch}")
        self.fold = fold
        self.epoch = epoch
