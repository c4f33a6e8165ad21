"""Exception types shared across the package."""


class ScaleLossError(Exception):
    """Base class for errors raised by this package."""


class InvalidBatchError(ScaleLossError, ValueError):
    """A batch of boxes or pairs is empty or otherwise unusable."""


class InvalidArgumentError(ScaleLossError, ValueError):
    pass


class ShapeError(ScaleLossError, ValueError):
    """Tensor shapes or parameter shapes do not line up."""


class ConfigError(ScaleLossError, ValueError):
    pass


class IngestionError(ScaleLossError, ValueError):
    """An input file or record could not be read.

    ``records`` lists human-readable locations of the offending entries.
    """

    def __init__(self, message, records=()):
        super().__init__(message)
        self.records = list(records)


class DivergenceError(ScaleLossError, ArithmeticError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
