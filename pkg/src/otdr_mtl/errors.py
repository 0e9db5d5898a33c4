"""Exception hierarchy shared by every module of the toolkit."""


class OtdrError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(OtdrError, ValueError):
    pass


class ExtractionFailure(OtdrError):
    """No window satisfying the extraction constraints exists in a trace."""


class TrainingFailure(OtdrError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class NumericOverflow(OtdrError, ArithmeticError):
    def __init__(self, block: str):
        super().__init__(f"non-finite values in parameter block {block!r}")
        self.block = block


class LoadError(OtdrError):
    pass


class CalibrationFailure(OtdrError):
    pass


class ConfigurationError(OtdrError):
    pass
