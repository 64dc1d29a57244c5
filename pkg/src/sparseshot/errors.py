"""Exception hierarchy shared by all sparseshot modules."""


class SparseShotError(Exception):
    pass


class ShapeError(SparseShotError, ValueError):
    pass


class RangeError(SparseShotError, ValueError):
    pass


class NonFinite(SparseShotError, ValueError):
    pass


class FormatError(SparseShotError, ValueError):
    pass


class InvalidConfig(SparseShotError, ValueError):
    pass


class InvalidPlan(InvalidConfig):
    pass


class EmptyAnnotations(SparseShotError, ValueError):
    pass


class EmptyDataset(SparseShotError, ValueError):
    pass


class OutOfBounds(SparseShotError, ValueError):
    pass


class PackingError(SparseShotError, RuntimeError):
    pass


class IoError(SparseShotError, OSError):
    pass


class Diverged(SparseShotError, FloatingPointError):
    """Raised when training produces a non-finite loss or parameter."""

    def __init__(self, step, message="non-finite value during training"):
        super().__init__(f"{message} (step {step})")
        self.step = step
