"""Exception hierarchy shared by every ``adrm`` module."""


class AdrmError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(AdrmError, ValueError):
    pass


class InvalidSplit(InvalidArgument):
    pass


class UnsupportedCorruption(InvalidArgument):
    pass


class UnsupportedArchitecture(InvalidArgument):
    pass


class EmptyMemory(AdrmError):
    pass


class NumericFailure(AdrmError, FloatingPointError):
    pass


class TrainingFailure(AdrmError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step


class UndefinedSimilarity(AdrmError, ValueError):
    pass


class ArtifactNotFound(AdrmError, FileNotFoundError):
    pass


class IncompatibleRuns(AdrmError):
    pass


class ConfigError(AdrmError, ValueError):
    """Config validation failure; ``path`` is the dotted location of the bad field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
