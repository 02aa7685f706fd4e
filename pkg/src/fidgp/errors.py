"""Exception hierarchy shared by every fidgp module."""


class FidgpError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(FidgpError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class NotPositiveDefinite(FidgpError, ArithmeticError):
    pass


class NotSymmetric(FidgpError, ValueError):
    pass


class SingularGram(FidgpError, ArithmeticError):
    pass


class InvalidScale(FidgpError, ValueError):
    pass


class NotScalar(FidgpError, ValueError):
    pass


class TapeConsumed(FidgpError, RuntimeError):
    pass


class NonFiniteActivation(FidgpError, ArithmeticError):
    pass


class NonFiniteLoss(FidgpError, ArithmeticError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class EmptyKeyLayers(FidgpError, ValueError):
    pass


class EmptyInput(FidgpError, ValueError):
    pass


class InvalidProbability(FidgpError, ValueError):
    pass


class ConfigError(FidgpError, ValueError):
    pass


class CheckpointError(FidgpError, ValueError):
    pass
