"""Exception types raised across the package."""


class CvstError(Exception):
    """Base class for all errors raised by :mod:`cvst`."""


class InvalidInput(CvstError, ValueError):
    pass


class NumericalFailure(CvstError, ArithmeticError):
    pass


class ShapeMismatch(CvstError, ValueError):
    pass


class NotDivisible(CvstError, ValueError):
    pass


class InvalidModulation(CvstError, ValueError):
    pass


class SubchannelDegenerate(CvstError):
    """A subchannel with (near) zero gain was asked to carry symbols."""


class SingularPilotMatrix(CvstError, ValueError):
    pass


class GatherMismatch(CvstError, ValueError):
    pass


class MissingReference(CvstError, ValueError):
    pass


class InvalidRate(CvstError, ValueError):
    pass


class CorruptCodeword(CvstError, ValueError):
    pass


class ContractViolation(CvstError, RuntimeError):
    """An operation was invoked with data its side of the link must not see."""


class ConfigError(CvstError, ValueError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")
